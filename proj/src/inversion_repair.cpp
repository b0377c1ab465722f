#include "bdlab/inversion_repair.hpp"

#include "bdlab/error.hpp"

namespace bdlab {

Dataset build_augmented(GeneratorBackend& backend, const Dataset& d_star,
                        const GeneratorPolicy& policy, std::uint64_t seed) {
  if (d_star.empty()) throw ConfigError("cannot augment an empty dataset");
  if (policy.vacuous()) throw ConfigError("no trigger learned");
  if (policy.backend != backend.kind()) {
    throw ConfigError("policy was produced by a different generator backend");
  }
  const Dataset view = d_star.defender_view();
  const ActResult acted = backend.act(policy, view, seed);

  Dataset out(d_star.num_classes());
  RecordId next = d_star.next_free_id();
  std::size_t j = 0;
  for (const auto& t : acted.texts) {
    while (view[j].id != t.id) ++j;
    TextRecord r;
    r.id = next++;
    r.text = t.text;
    r.label = view[j].label;
    r.original_label = view[j].label;
    r.provenance = Provenance::kAugmented;
    out.add(std::move(r));
  }
  return out;
}

Dataset build_augmented(const Dataset& d_star, const GeneratorPolicy& policy,
                        std::uint64_t seed) {
  if (policy.backend != BackendKind::kGreedy) {
    throw ConfigError("remote-LLM policies need a live backend to augment");
  }
  GreedyBackend backend;
  return build_augmented(backend, d_star, policy, seed);
}

Dataset concatenate(const Dataset& a, const Dataset& b) {
  if (a.num_classes() != b.num_classes()) {
    throw ConfigError("datasets disagree on the number of classes");
  }
  Dataset out(a.num_classes());
  for (const auto& r : a) out.add(r);
  for (const auto& r : b) out.add(r);
  return out;
}

VictimModel repair(const VictimModel& m, const Dataset& d_star,
                   const Dataset& augmented, const RepairConfig& cfg) {
  if (augmented.empty()) throw ConfigError("augmented set is empty");
  const Dataset combined = concatenate(d_star.defender_view(), augmented);
  TrainConfig tc = cfg.train;
  tc.trace_epochs = 0;
  if (cfg.fresh) {
    tc.arch = m.arch();
    tc.feature_dim = m.feature_dim();
    if (m.arch() == Architecture::kOneHidden) tc.hidden_units = m.hidden_units();
    return train(combined, tc).model;
  }
  return continue_training(m, combined, tc).model;
}

}  // namespace bdlab
