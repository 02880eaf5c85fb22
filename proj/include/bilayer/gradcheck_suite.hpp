#pragma once

#include <string>
#include <vector>

#include "bilayer/tensor.hpp"

namespace bilayer {

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0;
    std::size_t trials = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 1e-4;
    bool passed() const {
        for (const auto& e : entries)
            if (!(e.max_rel_error <= tolerance)) return false;
        return true;
    }
};

/// Finite-difference verification of every operator plus the composed
/// bilayer-GCN head loss and a small transformer decode with its set loss.
GradCheckReport run_gradcheck_suite(std::size_t trials_per_op = 20, std::uint64_t seed = 0);

}  // namespace bilayer
