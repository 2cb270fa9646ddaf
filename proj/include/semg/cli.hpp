#pragma once

#include <iosfwd>

#include "semg/error.hpp"

namespace semg::cli {

inline constexpr int kExitSuccess = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitRuntime = 3;

/// Usage for configuration mistakes, data for anything wrong with inputs on
/// disk, runtime for the rest.
int exit_code_for(ErrorCode code) noexcept;

/// Entry point of the `semg` tool. Subcommands: synth, pretrain,
/// train-subject, finetune, evaluate, loso, features.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace semg::cli
