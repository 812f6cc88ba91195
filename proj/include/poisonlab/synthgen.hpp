#pragma once

#include <string>

#include "poisonlab/dataset.hpp"

namespace poisonlab {

// Procedural image corpora for desk-scale experiments. A corpus seed fixes a
// family of per-class templates (smooth oriented cosine modes with per-class
// color balance); samples add translation jitter, a random smooth background,
// a cross-class distractor, and filtered pixel noise. Two corpora with
// different seeds and disjoint names play the roles of the training corpus
// and the class-disjoint POOD pool.
struct SynthCorpusSpec {
  uint64_t corpus_seed = 1;
  std::string name = "synthA";
  int num_classes = 10;
  int channels = 3;
  int height = 32, width = 32;
  int modes_per_class = 5;
  double template_amp = 0.42;    // peak template amplitude after normalization
  double distractor_amp = 0.18;  // other-class contamination strength
  double bg_amp = 0.16;          // smooth random background amplitude
  double noise_sigma = 0.02;     // per-pixel noise before 3x3 smoothing
  int max_shift = 3;             // template translation jitter (circular)
  double freq_min = 0.75, freq_max = 3.0;  // template mode band, cycles/image
};

LabeledDataset generate_corpus(const SynthCorpusSpec& spec, int per_class, uint64_t split_seed,
                               const std::string& split_name);

}  // namespace poisonlab
