#pragma once

// Command implementations behind the command-line tool. Each returns a
// process exit status and writes its JSON report to `out`.

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>

#include "mimn/run_config.hpp"

namespace mimn {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;     // gradcheck failure or unexpected error
constexpr int kExitConfig = 2;      // config / input validation problem
constexpr int kExitDivergence = 3;  // non-finite training loss

int cmd_train(const RunConfig& cfg, std::ostream& out);

int cmd_eval(const RunConfig& cfg, std::ostream& out);

int cmd_predict(const RunConfig& cfg, const std::string& premise, const std::string& hypothesis,
                std::ostream& out);

int cmd_gradcheck(const RunConfig& cfg, std::optional<std::uint64_t> seed, double tolerance,
                  bool corrupt, std::ostream& out);

int cmd_params(const RunConfig& cfg, std::ostream& out);

int cmd_gen_toy(const RunConfig& cfg, std::size_t size, std::ostream& out);

// Maps thrown errors onto the exit-code contract, reporting to `err`.
int run_guarded(const std::function<int()>& fn, std::ostream& err);

}  // namespace mimn
