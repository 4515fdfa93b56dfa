#pragma once

#include <stdexcept>
#include <string>

namespace icsd {

// Exit codes used by the CLI: 0 success, 2 config, 3 provider, 4 data.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ProviderError : std::runtime_error {
    explicit ProviderError(const std::string& msg, int attempts = 0, int last_status = 0)
        : std::runtime_error(msg), attempts(attempts), last_status(last_status) {}
    int attempts;
    int last_status;
};

}  // namespace icsd
