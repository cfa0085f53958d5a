#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace snet {

// Error taxonomy shared by the whole library. The CLI maps these to exit
// codes: ConfigError/UsageError -> 2, DataError -> 3, NumericError -> 4.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

enum class Mode { Train, Eval };

}  // namespace snet
