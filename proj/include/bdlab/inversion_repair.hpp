#pragma once

#include <cstdint>

#include "bdlab/corpus.hpp"
#include "bdlab/trigger_generator.hpp"
#include "bdlab/victim_lab.hpp"

namespace bdlab {

// One transformed copy of every record of d_star. Labels are kept, ids start at
// d_star.next_free_id() and provenance is Augmented. Records the backend fails
// to transform are dropped.
Dataset build_augmented(GeneratorBackend& backend, const Dataset& d_star,
                        const GeneratorPolicy& policy, std::uint64_t seed);

// Greedy policies need no backend state.
Dataset build_augmented(const Dataset& d_star, const GeneratorPolicy& policy,
                        std::uint64_t seed);

struct RepairConfig {
  TrainConfig train = [] {
    TrainConfig c;
    c.epochs = 10;
    c.trace_epochs = 0;
    return c;
  }();
  // Retrain from a fresh initialization instead of fine-tuning.
  bool fresh = false;
};

// d_star followed by augmented, as a single training set.
Dataset concatenate(const Dataset& a, const Dataset& b);

// Fine-tunes m (or trains from scratch when cfg.fresh) on d_star ∪ augmented.
VictimModel repair(const VictimModel& m, const Dataset& d_star,
                   const Dataset& augmented, const RepairConfig& cfg);

}  // namespace bdlab
