#pragma once

#include <stdexcept>
#include <string>

namespace edgevtp {

// Error kinds map 1:1 onto CLI exit codes: Config/Parse/Dimension -> 2,
// Divergence -> 3, Artifact -> 4. Contract and UndefinedMetric indicate
// caller bugs and surface as generic failures.
enum class ErrorKind {
    Dimension,
    Config,
    Parse,
    Contract,
    Artifact,
    Divergence,
    UndefinedMetric,
};

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

  private:
    ErrorKind kind_;
};

[[noreturn]] inline void throw_dimension(const std::string& msg) {
    throw Error(ErrorKind::Dimension, msg);
}
[[noreturn]] inline void throw_config(const std::string& msg) {
    throw Error(ErrorKind::Config, msg);
}
[[noreturn]] inline void throw_parse(const std::string& msg) {
    throw Error(ErrorKind::Parse, msg);
}
[[noreturn]] inline void throw_contract(const std::string& msg) {
    throw Error(ErrorKind::Contract, msg);
}
[[noreturn]] inline void throw_artifact(const std::string& msg) {
    throw Error(ErrorKind::Artifact, msg);
}

}  // namespace edgevtp
