#pragma once

#include "psal/data.hpp"
#include "psal/model.hpp"
#include "psal/trainer.hpp"

namespace psal::testing {

struct TrainedFixture {
  PreparedData data;
  Model model;
};

inline ModelSpec fixture_spec() {
  ModelSpec spec;
  spec.widths = {6, 12};
  spec.blocks_per_stage = 1;
  spec.height = 16;
  spec.width = 16;
  spec.num_classes = 10;
  return spec;
}

/// Small residual net trained for a few epochs on blob data; built once per binary.
inline const TrainedFixture& trained_fixture() {
  static const TrainedFixture t = [] {
    SynthSpec s;
    s.per_class = 40;
    s.seed = 5;
    TrainedFixture out{prepare(synth_blobs(s), {0.6, 0.2, 0.2, 1}), Model(fixture_spec(), 3)};
    TrainConfig c;
    c.epochs = 6;
    train(out.model, out.data.splits.train, out.data.splits.val, c);
    return out;
  }();
  return t;
}

}  // namespace psal::testing
