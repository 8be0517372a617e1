#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace asmi {

/// Root of every error the simulator raises. Outcomes such as isolation
/// faults or page faults are return values, not exceptions.
class SimError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GeometryError : SimError { using SimError::SimError; };
struct LifecycleError : SimError { using SimError::SimError; };
struct CapacityError : SimError { using SimError::SimError; };
struct ProtocolError : SimError { using SimError::SimError; };
struct DoubleFreeError : SimError { using SimError::SimError; };
struct InvalidFreeError : SimError { using SimError::SimError; };
struct MappingError : SimError { using SimError::SimError; };
struct RangeError : SimError { using SimError::SimError; };
struct ConfigError : SimError { using SimError::SimError; };
struct SpecError : SimError { using SimError::SimError; };
struct InvariantError : SimError { using SimError::SimError; };

/// An error tied to a position in a trace: the event sequence number for
/// validation and mode errors, the 1-based line number for parse errors.
class TraceError : public SimError {
 public:
  TraceError(const std::string& what, std::uint64_t where)
      : SimError(what), where_(where) {}

  std::uint64_t where() const noexcept { return where_; }

 private:
  std::uint64_t where_;
};

struct ParseError : TraceError { using TraceError::TraceError; };
struct ValidationError : TraceError { using TraceError::TraceError; };
struct ModeError : TraceError { using TraceError::TraceError; };

}  // namespace asmi
