#pragma once

#include "thetaguard/activation_store.hpp"
#include "thetaguard/linalg.hpp"

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace thetaguard {

// Angle and norm distribution of one prompt population.
struct RoleRing {
    double mean_theta = 1.0;
    double sigma_theta = 0.1;
    std::size_t count = 1;
    double norm_median = 30.0;     // log-normal median
    double norm_sigma_log = 0.2;   // log-normal shape
};

enum class RingOrientation { outer_harmful, inner_harmful };

// Two-ring geometry around a reference direction c: every sample is
// r (cos theta c + sin theta u) with u uniform on the unit sphere of c's
// orthogonal complement.
struct RingSpec {
    std::size_t dim = 64;
    std::optional<std::vector<double>> reference_direction;
    std::map<Role, RoleRing> roles;
    RingOrientation orientation = RingOrientation::outer_harmful;
    std::uint64_t seed = 1;
    std::string model_id = "synthetic-rings";

    void validate() const;
};

inline constexpr double kThetaClamp = 1e-6;

// Double-precision samples before float32 storage, with the sampled angles.
struct RingSamples {
    Matrix rows;
    std::vector<double> thetas;
    std::vector<std::string> prompt_ids;
    std::vector<Role> roles;
    std::vector<double> reference;
};

RingSamples sample_rings(const RingSpec& spec, int layer = 0);

std::pair<ActivationMatrix, DatasetManifest> generate(const RingSpec& spec);

// One spec per layer; all layers must agree on dim and per-role counts.
Dump generate_dump(const std::vector<RingSpec>& layer_specs);

// Presets with measured angular statistics of two real models: one where
// harmful prompts form the outer ring, one where they form the inner ring.
// 200 fit / 520 normative / 520 harmful / 250 benign prompts.
RingSpec outer_ring_preset(std::size_t dim = 1024, std::uint64_t seed = 20);
RingSpec inner_ring_preset(std::size_t dim = 1024, std::uint64_t seed = 25);

// JSON spec: {"dim", "seed", "model_id", "orientation", "roles": {role: {...}},
// optional "reference_direction", optional "layers": [ {"roles": {...}}, ... ]}
// where each layer entry overrides the top-level roles.
std::vector<RingSpec> ring_specs_from_json(const nlohmann::json& j);
nlohmann::json ring_spec_to_json(const RingSpec& spec);

struct OracleEstimate {
    double auroc = 0.0;
    double se = 0.0;
    std::size_t trials = 0;
};

// AUROC of the ideal |theta - mu0| scorer, sampling theta directly from the
// spec's distributions and counting pairs. Independent of the fitting pipeline.
OracleEstimate monte_carlo_auroc_oracle(const RingSpec& spec, std::size_t n_trials,
                                        Role negative = Role::normative_eval, std::uint64_t seed = 7);

// Activations whose normative variance is concentrated on the first three
// axes, with the harmful shift confined to axis `signal_axis`. Used to probe
// the dimension-pruning ablation.
struct SubspaceSignalSpec {
    std::size_t dim = 16;
    double offset = 10.0;                                  // normative mean along axis 0
    std::vector<double> axis_sigma = {3.0, 2.0, 1.5};      // stds of the leading axes
    double noise_sigma = 0.3;                              // std of the remaining axes
    std::size_t signal_axis = 2;
    double signal_shift = 6.0;
    std::size_t n_fit = 200;
    std::size_t n_eval = 520;
    std::size_t n_harmful = 520;
    std::size_t n_benign = 250;
    std::uint64_t seed = 3;
};

Dump generate_subspace_signal(const SubspaceSignalSpec& spec);

} // namespace thetaguard
