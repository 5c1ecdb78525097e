#pragma once

// Dataset / assignment CSV formats.
//
// Dataset files carry a header `x1,...,xK[,y][,t]` in that column order;
// values are plain decimals, `t` entries must be 0/1. Parse errors report
// the offending line number.

#include "car/types.hpp"

#include <optional>
#include <string>
#include <vector>

namespace car {

// Shortest round-trip decimal text for a double.
std::string format_double(double v);

struct LoadedDataset {
    Dataset data;
    std::optional<Assignment> assignment;  // from a `t` column, if present
};

LoadedDataset read_dataset_csv(const std::string& path);

void write_dataset_csv(const std::string& path, const Dataset& data,
                       const Assignment* assignment = nullptr);

// Header `unit,t`, units numbered from 1.
void write_assignment_csv(const std::string& path, const Assignment& assignment);

} // namespace car
