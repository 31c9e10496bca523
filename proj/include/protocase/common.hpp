#pragma once

// Shared error categories, margin-type labels and small process-wide helpers.

#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <algorithm>

namespace protocase {

// Error categories map 1:1 onto CLI exit codes (config=2, data=3, numeric=4).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class MarginType : int { Circumscribed = 0, Indistinct = 1, Spiculated = 2 };
inline constexpr int kNumMarginTypes = 3;

inline const char* margin_name(MarginType t) {
    switch (t) {
        case MarginType::Circumscribed: return "circumscribed";
        case MarginType::Indistinct: return "indistinct";
        case MarginType::Spiculated: return "spiculated";
    }
    return "?";
}

inline MarginType margin_from_name(const std::string& s) {
    if (s == "circumscribed") return MarginType::Circumscribed;
    if (s == "indistinct") return MarginType::Indistinct;
    if (s == "spiculated") return MarginType::Spiculated;
    throw DataError("unknown margin type: " + s);
}

// Worker-thread cap: PROTOCASE_THREADS wins over hardware concurrency.
inline int worker_thread_count() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw <= 0) hw = 1;
    if (const char* env = std::getenv("PROTOCASE_THREADS")) {
        char* end = nullptr;
        long cap = std::strtol(env, &end, 10);
        if (end != env && cap >= 1) hw = std::min<long>(hw, cap);
    }
    return hw;
}

}  // namespace protocase
