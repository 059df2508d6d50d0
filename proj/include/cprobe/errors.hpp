#pragma once

#include <stdexcept>
#include <string>

namespace cprobe {

/// Base of every error raised by the library. `name()` is the stable error
/// identifier reported by the command-line front end.
class Error : public std::runtime_error {
 public:
  Error(std::string name, const std::string& what)
      : std::runtime_error(what), name_(std::move(name)) {}

  const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
};

#define CPROBE_DEFINE_ERROR(Type)                                  \
  class Type : public Error {                                      \
   public:                                                         \
    explicit Type(const std::string& what) : Error(#Type, what) {} \
  }

CPROBE_DEFINE_ERROR(ShapeError);
CPROBE_DEFINE_ERROR(IoError);
CPROBE_DEFINE_ERROR(CanonizeError);
CPROBE_DEFINE_ERROR(TrainError);
CPROBE_DEFINE_ERROR(TraceError);
CPROBE_DEFINE_ERROR(IndexError);
CPROBE_DEFINE_ERROR(NameError);
CPROBE_DEFINE_ERROR(DataError);
CPROBE_DEFINE_ERROR(VectorError);
CPROBE_DEFINE_ERROR(ConfigError);
CPROBE_DEFINE_ERROR(UndefinedMetric);
CPROBE_DEFINE_ERROR(GenerationError);

#undef CPROBE_DEFINE_ERROR

}  // namespace cprobe
