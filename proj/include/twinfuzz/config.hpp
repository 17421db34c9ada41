#pragma once

#include <optional>
#include <string>

#include "twinfuzz/engine.hpp"

namespace twinfuzz::config {

class ConfigError : public std::exception {
public:
    explicit ConfigError(std::string msg) : msg_(std::move(msg)) {}
    const char* what() const noexcept override { return msg_.c_str(); }

private:
    std::string msg_;
};

// Parses a (possibly partial) JSON campaign config over the defaults.
// Unknown keys are errors.
engine::CampaignConfig parse_json(const std::string& text);
engine::CampaignConfig load_file(const std::string& path);

// Fully resolved config (the lock-file content).
std::string to_json(const engine::CampaignConfig& cfg);

}  // namespace twinfuzz::config
