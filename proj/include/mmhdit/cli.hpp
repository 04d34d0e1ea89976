#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace mmh::cli {

enum ExitCode : int { ok = 0, usage = 1, integrity = 2, runtime = 3 };

/// Parses "[416,736]" (quotes, brackets and spaces optional) as {height, width}.
/// Throws ConfigError on anything else.
std::array<std::int64_t, 2> parse_image_size(const std::string& text);

/// Height and width must be positive multiples of `factor`; the error lists
/// the nearest valid sizes.
void check_image_size(const std::array<std::int64_t, 2>& size, std::int64_t factor);

/// Entry point shared by the executable and the tests. Results go to `out`
/// as one JSON document; failures go to `err` as {"error", "message"} JSON.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mmh::cli
