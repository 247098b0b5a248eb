#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace blockbits {

// Every failure raised by the library derives from Error so callers (the CLI in
// particular) can report a single category name plus message.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(category + ": " + what), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

#define BLOCKBITS_DEFINE_ERROR(Name, label)                                  \
  class Name : public Error {                                                \
   public:                                                                   \
    explicit Name(const std::string& what) : Error(label, what) {}           \
  };

BLOCKBITS_DEFINE_ERROR(DimensionError, "dimension error")
BLOCKBITS_DEFINE_ERROR(ContractError, "contract error")
BLOCKBITS_DEFINE_ERROR(LookupError, "lookup error")
BLOCKBITS_DEFINE_ERROR(NumericError, "numeric error")
BLOCKBITS_DEFINE_ERROR(SpecError, "spec error")
BLOCKBITS_DEFINE_ERROR(SizeError, "size error")
BLOCKBITS_DEFINE_ERROR(TrainingError, "training error")
BLOCKBITS_DEFINE_ERROR(InputError, "input error")
BLOCKBITS_DEFINE_ERROR(PermutationError, "permutation error")
BLOCKBITS_DEFINE_ERROR(ReportError, "report error")

#undef BLOCKBITS_DEFINE_ERROR

// Malformed binary input. Carries the byte offset where decoding stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error("format error", what + " at byte offset " + std::to_string(offset)), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Configuration problems name the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error("config error", "'" + key + "': " + what), key_(std::move(key)) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

// Wraps a failure with the pipeline stage that produced it.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage '" + stage + "' failed", what), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace blockbits
