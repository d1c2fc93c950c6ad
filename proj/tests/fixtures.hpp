#pragma once

// Trained versions shared by the tests of one binary; built once on first use.

#include "vrec/versioning.hpp"

namespace vrec::fixture {

struct TrainedStore {
  TaskDataset task;
  VersionStore store;

  const MlpModel& model(int id) const { return store.get(id).model; }
};

/// Default glyph task with three versions trained by the standard lifecycle.
inline const TrainedStore& trained_store() {
  static TrainedStore s = [] {
    TrainedStore t;
    t.task = make_glyph_task(GlyphParams{}, 1);
    Rng rng(11);
    for (int i = 0; i < 3; ++i) (void)retire_and_replace(t.store, t.task, kDefaultSigma0, TrainConfig{}, rng);
    return t;
  }();
  return s;
}

}  // namespace vrec::fixture
