#include "thetaguard/synth.hpp"

#include "thetaguard/errors.hpp"
#include "thetaguard/random.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace thetaguard {

namespace {

using json = nlohmann::json;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

random::Engine layer_engine(std::uint64_t seed, int layer) {
    return random::Engine(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(layer) + 1)));
}

std::vector<double> random_unit(std::size_t dim, random::Engine& rng) {
    std::vector<double> v(dim);
    double n = 0.0;
    while (n < 1e-6) {
        for (auto& x : v) {
            x = random::standard_normal(rng);
        }
        n = norm(v);
    }
    for (auto& x : v) {
        x /= n;
    }
    return v;
}

std::string prompt_id(Role role, std::size_t index) {
    return fmt::format("{}-{:04}", to_string(role), index);
}

double sample_theta(const RoleRing& ring, random::Engine& rng) {
    const double t = ring.mean_theta + ring.sigma_theta * random::standard_normal(rng);
    return std::clamp(t, kThetaClamp, std::numbers::pi - kThetaClamp);
}

RoleRing ring_from_json(const json& j, RoleRing base) {
    for (const auto& [key, value] : j.items()) {
        if (key == "mean_theta") {
            base.mean_theta = value.get<double>();
        } else if (key == "sigma_theta") {
            base.sigma_theta = value.get<double>();
        } else if (key == "count") {
            base.count = value.get<std::size_t>();
        } else if (key == "norm_median") {
            base.norm_median = value.get<double>();
        } else if (key == "norm_sigma_log") {
            base.norm_sigma_log = value.get<double>();
        } else {
            throw UsageError(fmt::format("unknown ring key '{}'", key));
        }
    }
    return base;
}

void roles_from_json(const json& j, std::map<Role, RoleRing>& roles) {
    if (!j.is_object()) {
        throw UsageError("'roles' must be an object");
    }
    for (const auto& [name, ring] : j.items()) {
        const Role role = role_from_string(name);
        const auto it = roles.find(role);
        roles[role] = ring_from_json(ring, it == roles.end() ? RoleRing{} : it->second);
    }
}

std::string_view to_string(RingOrientation o) {
    return o == RingOrientation::outer_harmful ? "outer_harmful" : "inner_harmful";
}

} // namespace

void RingSpec::validate() const {
    if (dim < 2) {
        throw UsageError(fmt::format("ring spec dim {} must be at least 2", dim));
    }
    if (roles.empty()) {
        throw UsageError("ring spec has no roles");
    }
    if (reference_direction) {
        if (reference_direction->size() != dim) {
            throw UsageError(fmt::format("reference_direction has {} entries, dim is {}", reference_direction->size(),
                                         dim));
        }
        if (!(norm(*reference_direction) > 0.0)) {
            throw UsageError("reference_direction must be non-zero");
        }
    }
    for (const auto& [role, ring] : roles) {
        const auto name = to_string(role);
        if (!(ring.mean_theta > 0.0 && ring.mean_theta < std::numbers::pi)) {
            throw UsageError(fmt::format("{} mean_theta {} outside (0, pi)", name, ring.mean_theta));
        }
        if (!(ring.sigma_theta >= 0.0) || !std::isfinite(ring.sigma_theta)) {
            throw UsageError(fmt::format("{} sigma_theta {} must be non-negative", name, ring.sigma_theta));
        }
        if (ring.count < 1) {
            throw UsageError(fmt::format("{} count must be at least 1", name));
        }
        if (!(ring.norm_median > 0.0) || !(ring.norm_sigma_log >= 0.0)) {
            throw UsageError(fmt::format("{} norm distribution needs median > 0 and sigma_log >= 0", name));
        }
    }
    const auto h = roles.find(Role::harmful);
    const auto n = roles.find(Role::normative_fit);
    if (h != roles.end() && n != roles.end()) {
        const bool outer = h->second.mean_theta > n->second.mean_theta;
        if (outer != (orientation == RingOrientation::outer_harmful)) {
            throw UsageError(fmt::format("orientation {} contradicts harmful mean {} vs normative mean {}",
                                         to_string(orientation), h->second.mean_theta, n->second.mean_theta));
        }
    }
}

RingSamples sample_rings(const RingSpec& spec, int layer) {
    spec.validate();
    auto rng = layer_engine(spec.seed, layer);

    RingSamples out;
    if (spec.reference_direction) {
        out.reference = *spec.reference_direction;
        const double n = norm(out.reference);
        for (auto& x : out.reference) {
            x /= n;
        }
    } else {
        out.reference = random_unit(spec.dim, rng);
    }
    const auto& c = out.reference;

    std::size_t total = 0;
    for (const auto& [role, ring] : spec.roles) {
        total += ring.count;
    }
    out.rows = Matrix(total, spec.dim);
    out.thetas.reserve(total);

    std::vector<double> u(spec.dim);
    std::size_t r = 0;
    for (Role role : kAllRoles) {
        const auto it = spec.roles.find(role);
        if (it == spec.roles.end()) {
            continue;
        }
        const RoleRing& ring = it->second;
        for (std::size_t i = 0; i < ring.count; ++i, ++r) {
            const double t = sample_theta(ring, rng);
            double un = 0.0;
            while (un < 1e-6) {
                for (auto& x : u) {
                    x = random::standard_normal(rng);
                }
                const double along = dot(u, c);
                for (std::size_t d = 0; d < spec.dim; ++d) {
                    u[d] -= along * c[d];
                }
                un = norm(u);
            }
            const double radius = ring.norm_median * std::exp(ring.norm_sigma_log * random::standard_normal(rng));
            const double a = radius * std::cos(t);
            const double b = radius * std::sin(t) / un;
            auto row = out.rows.row(r);
            for (std::size_t d = 0; d < spec.dim; ++d) {
                row[d] = a * c[d] + b * u[d];
            }
            out.thetas.push_back(t);
            out.prompt_ids.push_back(prompt_id(role, i));
            out.roles.push_back(role);
        }
    }
    return out;
}

namespace {

ActivationMatrix to_activation(const RingSamples& s, int layer) {
    std::vector<float> values(s.rows.data().size());
    std::transform(s.rows.data().begin(), s.rows.data().end(), values.begin(),
                   [](double x) { return static_cast<float>(x); });
    return ActivationMatrix(layer, s.rows.cols(), std::move(values), s.prompt_ids);
}

DatasetManifest manifest_for(const RingSamples& s, const std::string& model_id, int num_layers) {
    DatasetManifest m;
    m.model_id = model_id;
    m.num_layers = num_layers;
    m.dim = s.rows.cols();
    for (std::size_t i = 0; i < s.prompt_ids.size(); ++i) {
        m.groups[s.roles[i]].push_back(s.prompt_ids[i]);
    }
    for (const auto& [role, ids] : m.groups) {
        m.source_corpus[role] = "synthetic";
    }
    m.prompt_ids = s.prompt_ids;
    return m;
}

} // namespace

std::pair<ActivationMatrix, DatasetManifest> generate(const RingSpec& spec) {
    const RingSamples s = sample_rings(spec, 0);
    return {to_activation(s, 0), manifest_for(s, spec.model_id, 1)};
}

Dump generate_dump(const std::vector<RingSpec>& layer_specs) {
    if (layer_specs.empty()) {
        throw UsageError("generate_dump needs at least one layer spec");
    }
    Dump dump;
    const auto layers = static_cast<int>(layer_specs.size());
    for (int l = 0; l < layers; ++l) {
        const RingSpec& spec = layer_specs[static_cast<std::size_t>(l)];
        const RingSpec& first = layer_specs.front();
        if (spec.dim != first.dim) {
            throw UsageError(fmt::format("layer {} dim {} differs from layer 0 dim {}", l, spec.dim, first.dim));
        }
        if (spec.roles.size() != first.roles.size()) {
            throw UsageError(fmt::format("layer {} has a different role set", l));
        }
        for (const auto& [role, ring] : first.roles) {
            const auto it = spec.roles.find(role);
            if (it == spec.roles.end() || it->second.count != ring.count) {
                throw UsageError(fmt::format("layer {} count for {} differs from layer 0", l, to_string(role)));
            }
        }
        const RingSamples s = sample_rings(spec, l);
        dump.layers.push_back(to_activation(s, l));
        if (l == 0) {
            dump.manifest = manifest_for(s, first.model_id, layers);
        }
    }
    dump.manifest.validate();
    return dump;
}

namespace {

RingSpec preset(std::size_t dim, std::uint64_t seed, RingOrientation orientation, double mu0, double sigma_norm,
                double harm_mean, double harm_sigma, double benign_mean, double benign_sigma, std::string model) {
    RingSpec spec;
    spec.dim = dim;
    spec.seed = seed;
    spec.orientation = orientation;
    spec.model_id = std::move(model);
    spec.roles[Role::normative_fit] = {mu0, sigma_norm, 200};
    spec.roles[Role::normative_eval] = {mu0, sigma_norm, 520};
    spec.roles[Role::harmful] = {harm_mean, harm_sigma, 520};
    spec.roles[Role::benign_aggressive] = {benign_mean, benign_sigma, 250};
    return spec;
}

} // namespace

// The table gives no benign spread; 0.10 and 0.08 rad keep benign inside the
// harmful deviation band, which is what the reported h/b = 1.000 requires.
RingSpec outer_ring_preset(std::size_t dim, std::uint64_t seed) {
    return preset(dim, seed, RingOrientation::outer_harmful, 1.161, 0.272, 1.811, 0.034, 1.094, 0.10,
                  "synthetic-outer-ring");
}

RingSpec inner_ring_preset(std::size_t dim, std::uint64_t seed) {
    return preset(dim, seed, RingOrientation::inner_harmful, 1.819, 0.188, 1.357, 0.034, 1.821, 0.08,
                  "synthetic-inner-ring");
}

std::vector<RingSpec> ring_specs_from_json(const json& j) {
    if (!j.is_object()) {
        throw UsageError("ring spec must be a JSON object");
    }
    RingSpec base;
    if (j.contains("preset")) {
        const auto name = j.at("preset").get<std::string>();
        if (name == "outer") {
            base = outer_ring_preset();
        } else if (name == "inner") {
            base = inner_ring_preset();
        } else {
            throw UsageError(fmt::format("unknown preset '{}' (outer, inner)", name));
        }
    }
    std::size_t num_layers = 1;
    const json* layers = nullptr;
    for (const auto& [key, value] : j.items()) {
        if (key == "preset") {
            continue;
        } else if (key == "dim") {
            base.dim = value.get<std::size_t>();
        } else if (key == "seed") {
            base.seed = value.get<std::uint64_t>();
        } else if (key == "model_id") {
            base.model_id = value.get<std::string>();
        } else if (key == "orientation") {
            const auto o = value.get<std::string>();
            if (o == "outer_harmful") {
                base.orientation = RingOrientation::outer_harmful;
            } else if (o == "inner_harmful") {
                base.orientation = RingOrientation::inner_harmful;
            } else {
                throw UsageError(fmt::format("unknown orientation '{}'", o));
            }
        } else if (key == "reference_direction") {
            base.reference_direction = value.get<std::vector<double>>();
        } else if (key == "roles") {
            roles_from_json(value, base.roles);
        } else if (key == "num_layers") {
            num_layers = value.get<std::size_t>();
        } else if (key == "layers") {
            if (!value.is_array()) {
                throw UsageError("'layers' must be an array");
            }
            layers = &value;
        } else {
            throw UsageError(fmt::format("unknown ring spec key '{}'", key));
        }
    }
    if (layers) {
        if (j.contains("num_layers") && layers->size() != num_layers) {
            throw UsageError(fmt::format("num_layers {} but {} layer entries", num_layers, layers->size()));
        }
        num_layers = layers->size();
    }
    if (num_layers < 1) {
        throw UsageError("num_layers must be at least 1");
    }
    std::vector<RingSpec> out(num_layers, base);
    if (layers) {
        for (std::size_t l = 0; l < num_layers; ++l) {
            const json& entry = (*layers)[l];
            for (const auto& [key, value] : entry.items()) {
                if (key == "roles") {
                    roles_from_json(value, out[l].roles);
                } else if (key == "orientation") {
                    out[l].orientation = value.get<std::string>() == "inner_harmful" ? RingOrientation::inner_harmful
                                                                                     : RingOrientation::outer_harmful;
                } else {
                    throw UsageError(fmt::format("unknown layer key '{}'", key));
                }
            }
        }
    }
    for (const auto& s : out) {
        s.validate();
    }
    return out;
}

json ring_spec_to_json(const RingSpec& spec) {
    json roles = json::object();
    for (const auto& [role, ring] : spec.roles) {
        roles[std::string(to_string(role))] = {{"mean_theta", ring.mean_theta},
                                               {"sigma_theta", ring.sigma_theta},
                                               {"count", ring.count},
                                               {"norm_median", ring.norm_median},
                                               {"norm_sigma_log", ring.norm_sigma_log}};
    }
    json j = {{"dim", spec.dim},
              {"seed", spec.seed},
              {"model_id", spec.model_id},
              {"orientation", std::string(to_string(spec.orientation))},
              {"roles", roles}};
    if (spec.reference_direction) {
        j["reference_direction"] = *spec.reference_direction;
    }
    return j;
}

OracleEstimate monte_carlo_auroc_oracle(const RingSpec& spec, std::size_t n_trials, Role negative,
                                        std::uint64_t seed) {
    spec.validate();
    if (n_trials < 2) {
        throw UsageError("oracle needs at least 2 trials");
    }
    const auto h = spec.roles.find(Role::harmful);
    const auto n = spec.roles.find(negative);
    const auto fit = spec.roles.find(Role::normative_fit);
    if (h == spec.roles.end() || n == spec.roles.end()) {
        throw UsageError(fmt::format("oracle needs harmful and {} roles", to_string(negative)));
    }
    const double mu0 = fit != spec.roles.end() ? fit->second.mean_theta : n->second.mean_theta;

    random::Engine rng(splitmix64(seed));
    std::vector<double> pos(h->second.count);
    std::vector<double> neg(n->second.count);
    double sum = 0.0;
    double sum_sq = 0.0;
    for (std::size_t t = 0; t < n_trials; ++t) {
        for (auto& x : pos) {
            x = std::abs(sample_theta(h->second, rng) - mu0);
        }
        for (auto& x : neg) {
            x = std::abs(sample_theta(n->second, rng) - mu0);
        }
        double wins = 0.0;
        for (double p : pos) {
            for (double q : neg) {
                wins += p > q ? 1.0 : (p == q ? 0.5 : 0.0);
            }
        }
        const double a = wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
        sum += a;
        sum_sq += a * a;
    }
    const auto k = static_cast<double>(n_trials);
    OracleEstimate out;
    out.trials = n_trials;
    out.auroc = sum / k;
    const double var = std::max(0.0, (sum_sq - k * out.auroc * out.auroc) / (k - 1.0));
    out.se = std::sqrt(var / k);
    return out;
}

Dump generate_subspace_signal(const SubspaceSignalSpec& spec) {
    if (spec.axis_sigma.empty() || spec.axis_sigma.size() >= spec.dim) {
        throw UsageError("subspace spec needs 1 <= leading axes < dim");
    }
    if (spec.signal_axis >= spec.axis_sigma.size()) {
        throw UsageError("signal_axis must be one of the leading axes");
    }
    auto rng = layer_engine(spec.seed, 0);
    const std::pair<Role, std::size_t> groups[] = {{Role::normative_fit, spec.n_fit},
                                                   {Role::normative_eval, spec.n_eval},
                                                   {Role::harmful, spec.n_harmful},
                                                   {Role::benign_aggressive, spec.n_benign}};
    std::vector<float> values;
    std::vector<std::string> ids;
    DatasetManifest m;
    m.model_id = "synthetic-subspace";
    m.num_layers = 1;
    m.dim = spec.dim;
    for (const auto& [role, count] : groups) {
        for (std::size_t i = 0; i < count; ++i) {
            for (std::size_t d = 0; d < spec.dim; ++d) {
                const double sd = d < spec.axis_sigma.size() ? spec.axis_sigma[d] : spec.noise_sigma;
                double x = sd * random::standard_normal(rng);
                if (d == 0) {
                    x += spec.offset;
                }
                if (role == Role::harmful && d == spec.signal_axis) {
                    x += spec.signal_shift;
                }
                values.push_back(static_cast<float>(x));
            }
            ids.push_back(prompt_id(role, i));
            m.groups[role].push_back(ids.back());
        }
        if (count > 0) {
            m.source_corpus[role] = "synthetic";
        }
    }
    m.prompt_ids = ids;
    m.validate();
    Dump dump;
    dump.layers.emplace_back(0, spec.dim, std::move(values), std::move(ids));
    dump.manifest = std::move(m);
    return dump;
}

} // namespace thetaguard
