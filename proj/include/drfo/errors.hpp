#pragma once

#include <stdexcept>
#include <string>

namespace drfo {

// Every failure surfaced by the library derives from Error and carries a
// category string so the CLI can report it without inspecting the type.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

#define DRFO_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(tag, what) {}       \
  }

DRFO_DEFINE_ERROR(UsageError, "usage");
DRFO_DEFINE_ERROR(ParseError, "parse");
DRFO_DEFINE_ERROR(IntegrityError, "integrity");
DRFO_DEFINE_ERROR(EmptyResultError, "empty-result");
DRFO_DEFINE_ERROR(DegenerateDataError, "degenerate-data");
DRFO_DEFINE_ERROR(MetricError, "metric");
DRFO_DEFINE_ERROR(ConfigError, "config");
DRFO_DEFINE_ERROR(NumericalError, "numerical");
DRFO_DEFINE_ERROR(TrainingError, "training");
DRFO_DEFINE_ERROR(IoError, "io");

#undef DRFO_DEFINE_ERROR

}  // namespace drfo
