// Quantizes a freshly initialized toy model with a two-level assignment,
// packs it, reads it back and compares losses.
#include <cstdio>

#include "blockbits/packed.hpp"
#include "blockbits/selftest.hpp"

using namespace blockbits;

int main() {
  const ModelBundle m = build_model(tiny_spec());
  const Batch batch = random_batch(m.spec(), 4, 1);
  QuantConfig cfg;
  cfg.group_size = 16;
  const BlockPartition p = partition_weights(m, 8, 16, cfg.group_size);

  Assignment b(p.size());
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = p.block(i).layer == 0 ? 4 : 2;

  const auto bytes = encode_packed_file(pack_model(m, p, b, cfg));
  const QuantizedWeights live = quantize_model(m, p, b, cfg);
  const QuantizedWeights packed = unpack_model(decode_packed_file(bytes), m);
  const EffectiveBits e = effective_bits(b, p, cfg);

  std::printf("blocks           %zu\n", p.size());
  std::printf("packed bytes     %zu\n", bytes.size());
  std::printf("weight bits      %.4f\n", e.weight);
  std::printf("total bits       %.4f\n", e.total);
  std::printf("loss fp          %.9f\n", forward_loss(m, batch));
  std::printf("loss live        %.9f\n", forward_loss(WeightView(m, live.sites), batch));
  std::printf("loss packed      %.9f\n", forward_loss(WeightView(m, packed.sites), batch));
  return live.sites == packed.sites ? 0 : 1;
}
