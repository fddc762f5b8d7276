#pragma once

#include "fen/config.hpp"

namespace fen {

// The five batch commands. Each returns 0 on success and signals failure by
// throwing: UsageError, DataError or NumericError, which the front end maps
// to exit codes 1, 2 and 3.
int cmd_train(const RunConfig& cfg);
int cmd_detect(const RunConfig& cfg);
int cmd_eval(const RunConfig& cfg);
int cmd_gradcheck(const RunConfig& cfg);
int cmd_pmstats(const RunConfig& cfg);

}  // namespace fen
