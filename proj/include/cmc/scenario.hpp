#pragma once

// Synthetic stand-in for a pair of deployed embedding models.
//
// Every identity c owns a latent centre z_c ~ N(0, I_k). A sample of c has an
// identity code u = z_c + tau * e and a nuisance code n ~ N(0, nu^2 I) (think
// pose or lighting), both shared by the two models because both models see
// the same image. Model m encodes the sample as
//     x_m = normalize(nl_m(gain * A_m [u; n] / sqrt(k + k_n))) + sigma_m * eps
// with its own random projection A_m and nonlinearity nl_m.

#include <cstdint>
#include <string>

#include "cmc/embedding_set.hpp"

namespace cmc {

enum class Nonlinearity { tanh, relu, none };
enum class ShiftLevel { similar, large };

const char* to_string(Nonlinearity nl);
Nonlinearity nonlinearity_from_string(const std::string& s);
const char* to_string(ShiftLevel s);
ShiftLevel shift_level_from_string(const std::string& s);

struct ModelSpec {
  std::uint64_t projection_seed = 1;
  Nonlinearity nonlinearity = Nonlinearity::tanh;
  Index out_dim = 64;
  double noise = 0.0;
  double gain = 1.0;
};

struct ScenarioSpec {
  std::string name = "similar";
  Index latent_dim = 32;
  Index nuisance_dim = 16;
  double intra_class = 0.4;  // tau
  double nuisance = 0.5;     // nu
  Index train_classes = 600;
  Index eval_classes = 100;
  Index samples_per_class = 20;
  ShiftLevel shift = ShiftLevel::similar;
  ModelSpec query;
  ModelSpec gallery;

  // Desk-scale presets: both models tanh ("similar"), tanh vs relu ("large"),
  // and a large-shift pair with 64-d queries and 96-d gallery ("mixed").
  static ScenarioSpec similar();
  static ScenarioSpec large();
  static ScenarioSpec mixed();
};

// Field-path validation errors, e.g. "gallery.noise must be >= 0".
void validate(const ScenarioSpec& spec);

struct Scenario {
  ScenarioSpec spec;
  std::uint64_t seed = 0;
  PairedDataset train;  // labels 0 .. train_classes-1
  PairedDataset eval;   // labels train_classes .. train_classes+eval_classes-1
  // Within-model rank-1 of each side on the untransformed eval split.
  double calibration_rank1_query = 0.0;
  double calibration_rank1_gallery = 0.0;
  bool degenerate = false;  // either calibration rank-1 < 0.5
};

// Pure function of (spec, seed).
Scenario generate_scenario(const ScenarioSpec& spec, std::uint64_t seed);

}  // namespace cmc
