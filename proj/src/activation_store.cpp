#include "thetaguard/activation_store.hpp"

#include "thetaguard/errors.hpp"
#include "thetaguard/random.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace thetaguard {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Role role) {
    switch (role) {
    case Role::normative_fit:
        return "normative_fit";
    case Role::normative_eval:
        return "normative_eval";
    case Role::harmful:
        return "harmful";
    case Role::benign_aggressive:
        return "benign_aggressive";
    }
    return "unknown";
}

Role role_from_string(std::string_view name) {
    for (Role r : kAllRoles) {
        if (to_string(r) == name) {
            return r;
        }
    }
    throw DataError(fmt::format("unknown role '{}'", name));
}

std::string_view to_string(Ordering ordering) {
    return ordering == Ordering::forward ? "forward" : "reverse";
}

Ordering ordering_from_string(std::string_view name) {
    if (name == "forward") {
        return Ordering::forward;
    }
    if (name == "reverse") {
        return Ordering::reverse;
    }
    throw UsageError(fmt::format("ordering must be forward or reverse, got '{}'", name));
}

ActivationMatrix::ActivationMatrix(int layer_index, std::size_t dim, std::vector<float> values,
                                   std::vector<std::string> prompt_ids)
    : layer_index_(layer_index), dim_(dim), values_(std::move(values)), prompt_ids_(std::move(prompt_ids)) {
    if (dim_ == 0) {
        throw DataError(fmt::format("layer {}: dimension must be positive", layer_index_));
    }
    if (layer_index_ < 0) {
        throw DataError(fmt::format("layer index {} is negative", layer_index_));
    }
    if (values_.size() != prompt_ids_.size() * dim_) {
        throw DataError(fmt::format("layer {}: {} values do not fill {} rows of dimension {}", layer_index_,
                                    values_.size(), prompt_ids_.size(), dim_));
    }
}

void ActivationMatrix::validate_rows() const {
    for (std::size_t r = 0; r < rows(); ++r) {
        bool nonzero = false;
        for (float v : row(r)) {
            if (!std::isfinite(v)) {
                throw DataError(fmt::format("layer {}, prompt '{}': non-finite activation", layer_index_,
                                            prompt_ids_[r]));
            }
            nonzero = nonzero || v != 0.0f;
        }
        if (!nonzero) {
            throw DataError(fmt::format("layer {}, prompt '{}': zero-norm activation row", layer_index_,
                                        prompt_ids_[r]));
        }
    }
}

Matrix ActivationMatrix::to_matrix(std::span<const std::size_t> row_indices) const {
    Matrix out(row_indices.size(), dim_);
    for (std::size_t i = 0; i < row_indices.size(); ++i) {
        const auto src = row(row_indices[i]);
        auto dst = out.row(i);
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return out;
}

std::size_t DatasetManifest::n_fit() const {
    return group(Role::normative_fit).size();
}

const std::vector<std::string>& DatasetManifest::group(Role role) const {
    static const std::vector<std::string> empty;
    const auto it = groups.find(role);
    return it == groups.end() ? empty : it->second;
}

void DatasetManifest::validate() const {
    if (dim == 0) {
        throw DataError("manifest: dim must be positive");
    }
    if (num_layers <= 0) {
        throw DataError("manifest: num_layers must be positive");
    }
    std::unordered_set<std::string> known;
    for (const auto& id : prompt_ids) {
        if (!known.insert(id).second) {
            throw DataError(fmt::format("manifest: duplicate prompt_id '{}'", id));
        }
    }
    std::unordered_map<std::string, Role> owner;
    for (const auto& [role, ids] : groups) {
        for (const auto& id : ids) {
            if (!known.contains(id)) {
                throw DataError(
                    fmt::format("manifest: {} prompt_id '{}' is missing from the layer files", to_string(role), id));
            }
            const auto [it, inserted] = owner.emplace(id, role);
            if (!inserted) {
                throw DataError(fmt::format("manifest: prompt_id '{}' appears in both {} and {}", id,
                                            to_string(it->second), to_string(role)));
            }
        }
    }
    for (const auto& [layer, file] : layer_files) {
        if (layer < 0 || layer >= num_layers) {
            throw DataError(fmt::format("manifest: layer {} outside [0, {})", layer, num_layers));
        }
    }
}

const ActivationMatrix& Dump::layer(int index) const {
    for (const auto& m : layers) {
        if (m.layer_index() == index) {
            return m;
        }
    }
    throw UsageError(fmt::format("layer {} is not present in the dump", index));
}

std::vector<int> Dump::layer_indices() const {
    std::vector<int> out;
    out.reserve(layers.size());
    for (const auto& m : layers) {
        out.push_back(m.layer_index());
    }
    return out;
}

std::vector<std::size_t> Dump::rows_of(std::span<const std::string> ids) const {
    std::unordered_map<std::string_view, std::size_t> row_index;
    if (!layers.empty()) {
        const auto& order = layers.front().prompt_ids();
        for (std::size_t i = 0; i < order.size(); ++i) {
            row_index.emplace(order[i], i);
        }
    }
    std::vector<std::size_t> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        const auto it = row_index.find(id);
        if (it == row_index.end()) {
            throw DataError(fmt::format("prompt_id '{}' not found in dump", id));
        }
        out.push_back(it->second);
    }
    return out;
}

namespace {

constexpr char kMagic[4] = {'L', 'B', 'I', 'O'};
constexpr std::size_t kHeaderBytes = 4 + 2 + 4 + 4;

template <typename T>
void put_le(std::string& out, T value) {
    using U = std::make_unsigned_t<T>;
    auto bits = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<char>(bits & 0xFFu));
        bits = static_cast<U>(bits >> 8);
    }
}

template <typename T>
T get_le(const unsigned char* p) {
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        value = static_cast<T>(value | (static_cast<T>(p[i]) << (8 * i)));
    }
    return value;
}

std::string read_all(const fs::path& file) {
    std::ifstream in(file, std::ios::binary | std::ios::ate);
    if (!in) {
        throw DataError(fmt::format("cannot open {}", file.string()));
    }
    std::string bytes(static_cast<std::size_t>(in.tellg()), '\0');
    in.seekg(0);
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!in) {
        throw DataError(fmt::format("cannot read {}", file.string()));
    }
    return bytes;
}

void write_all(const fs::path& file, std::string_view bytes) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError(fmt::format("cannot write {}", file.string()));
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw DataError(fmt::format("short write to {}", file.string()));
    }
}

std::vector<std::string> default_prompt_order(const DatasetManifest& m) {
    std::vector<std::string> ids;
    for (Role r : kAllRoles) {
        const auto& g = m.group(r);
        ids.insert(ids.end(), g.begin(), g.end());
    }
    return ids;
}

json manifest_to_json(const DatasetManifest& m) {
    json j;
    j["format_version"] = kDumpFormatVersion;
    j["model_id"] = m.model_id;
    j["num_layers"] = m.num_layers;
    j["dim"] = m.dim;
    j["n_fit"] = m.n_fit();
    j["template"] = m.prompt_template;
    j["layer_convention"] = m.layer_convention;
    json groups = json::object();
    json corpus = json::object();
    for (Role r : kAllRoles) {
        if (const auto it = m.groups.find(r); it != m.groups.end()) {
            groups[std::string(to_string(r))] = it->second;
        }
        if (const auto it = m.source_corpus.find(r); it != m.source_corpus.end()) {
            corpus[std::string(to_string(r))] = it->second;
        }
    }
    j["groups"] = groups;
    j["source_corpus"] = corpus;
    json files = json::object();
    for (const auto& [layer, file] : m.layer_files) {
        files[std::to_string(layer)] = file;
    }
    j["layer_files"] = files;
    j["prompt_ids"] = m.prompt_ids;
    return j;
}

DatasetManifest manifest_from_json(const json& j) {
    DatasetManifest m;
    try {
        if (j.contains("format_version") && j.at("format_version").get<int>() != kDumpFormatVersion) {
            throw DataError(fmt::format("manifest: unsupported format_version {} (expected {})",
                                        j.at("format_version").get<int>(), kDumpFormatVersion));
        }
        m.model_id = j.at("model_id").get<std::string>();
        m.num_layers = j.at("num_layers").get<int>();
        m.dim = j.at("dim").get<std::size_t>();
        for (const auto& [name, ids] : j.at("groups").items()) {
            m.groups[role_from_string(name)] = ids.get<std::vector<std::string>>();
        }
        if (j.contains("source_corpus")) {
            for (const auto& [name, src] : j.at("source_corpus").items()) {
                m.source_corpus[role_from_string(name)] = src.get<std::string>();
            }
        }
        m.prompt_template = j.value("template", std::string("none"));
        m.layer_convention = j.value("layer_convention", m.layer_convention);
        for (const auto& [key, file] : j.at("layer_files").items()) {
            std::size_t used = 0;
            const int layer = std::stoi(key, &used);
            if (used != key.size()) {
                throw DataError(fmt::format("manifest: layer_files key '{}' is not an integer", key));
            }
            m.layer_files[layer] = file.get<std::string>();
        }
        m.prompt_ids = j.contains("prompt_ids") ? j.at("prompt_ids").get<std::vector<std::string>>()
                                                : default_prompt_order(m);
        if (j.contains("n_fit") && j.at("n_fit").get<std::size_t>() != m.n_fit()) {
            throw DataError(fmt::format("manifest: n_fit {} disagrees with {} normative_fit ids",
                                        j.at("n_fit").get<std::size_t>(), m.n_fit()));
        }
    } catch (const json::exception& e) {
        throw DataError(fmt::format("manifest: {}", e.what()));
    } catch (const std::invalid_argument&) {
        throw DataError("manifest: malformed layer_files key");
    }
    return m;
}

} // namespace

void write_layer_file(const ActivationMatrix& matrix, const fs::path& file) {
    std::string bytes;
    bytes.reserve(kHeaderBytes + matrix.values().size() * 4);
    bytes.append(kMagic, 4);
    put_le<std::uint16_t>(bytes, kDumpFormatVersion);
    put_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(matrix.rows()));
    put_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(matrix.dim()));
    for (float v : matrix.values()) {
        put_le<std::uint32_t>(bytes, std::bit_cast<std::uint32_t>(v));
    }
    write_all(file, bytes);
}

ActivationMatrix read_layer_file(const fs::path& file, int layer_index, std::vector<std::string> prompt_ids) {
    const std::string bytes = read_all(file);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < kHeaderBytes) {
        throw DataError(fmt::format("layer {}: truncated header in {}", layer_index, file.string()));
    }
    if (std::memcmp(p, kMagic, 4) != 0) {
        throw DataError(fmt::format("layer {}: bad magic in {}", layer_index, file.string()));
    }
    const auto version = get_le<std::uint16_t>(p + 4);
    if (version != kDumpFormatVersion) {
        throw DataError(fmt::format("layer {}: unsupported version {} (expected {})", layer_index, version,
                                    kDumpFormatVersion));
    }
    const auto rows = get_le<std::uint32_t>(p + 6);
    const auto dim = get_le<std::uint32_t>(p + 10);
    const std::size_t expected = kHeaderBytes + std::size_t{rows} * dim * 4;
    if (bytes.size() < expected) {
        throw DataError(fmt::format("layer {}: truncated payload ({} of {} bytes)", layer_index, bytes.size(),
                                    expected));
    }
    if (bytes.size() > expected) {
        throw DataError(fmt::format("layer {}: {} trailing bytes", layer_index, bytes.size() - expected));
    }
    if (rows != prompt_ids.size()) {
        throw DataError(fmt::format("layer {}: {} rows but manifest lists {} prompts", layer_index, rows,
                                    prompt_ids.size()));
    }
    std::vector<float> values(std::size_t{rows} * dim);
    const unsigned char* payload = p + kHeaderBytes;
    for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = std::bit_cast<float>(get_le<std::uint32_t>(payload + 4 * i));
    }
    return ActivationMatrix(layer_index, dim, std::move(values), std::move(prompt_ids));
}

void write_dump(std::span<const ActivationMatrix> matrices, const DatasetManifest& manifest, const fs::path& dir) {
    if (matrices.empty()) {
        throw DataError("write_dump: no layers");
    }
    std::vector<const ActivationMatrix*> sorted;
    for (const auto& m : matrices) {
        sorted.push_back(&m);
    }
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const auto* a, const auto* b) { return a->layer_index() < b->layer_index(); });

    const auto& first = *sorted.front();
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        const auto& m = *sorted[i];
        if (m.layer_index() != first.layer_index() + static_cast<int>(i)) {
            throw DataError(fmt::format("write_dump: layers must be a contiguous range, found gap or repeat at {}",
                                        m.layer_index()));
        }
        if (m.dim() != first.dim()) {
            throw DataError(fmt::format("write_dump: layer {} has dimension {} but layer {} has {}", m.layer_index(),
                                        m.dim(), first.layer_index(), first.dim()));
        }
        if (m.prompt_ids() != first.prompt_ids()) {
            throw DataError(fmt::format("write_dump: layer {} prompt order differs from layer {}", m.layer_index(),
                                        first.layer_index()));
        }
        m.validate_rows();
    }

    DatasetManifest out = manifest;
    out.prompt_ids = first.prompt_ids();
    if (out.dim != first.dim()) {
        throw DataError(fmt::format("write_dump: manifest dim {} but matrices have {}", out.dim, first.dim()));
    }
    out.layer_files.clear();
    for (const auto* m : sorted) {
        out.layer_files[m->layer_index()] = fmt::format("layer_{:03}.bin", m->layer_index());
    }
    out.validate();

    fs::create_directories(dir);
    for (const auto* m : sorted) {
        write_layer_file(*m, dir / out.layer_files.at(m->layer_index()));
    }
    write_all(dir / kManifestFile, manifest_to_json(out).dump(2) + "\n");
}

Dump read_dump(const fs::path& dir) {
    json j;
    try {
        j = json::parse(read_all(dir / kManifestFile));
    } catch (const json::parse_error& e) {
        throw DataError(fmt::format("manifest: {}", e.what()));
    }
    Dump dump;
    dump.manifest = manifest_from_json(j);
    dump.manifest.validate();
    if (dump.manifest.layer_files.empty()) {
        throw DataError("manifest: no layer_files");
    }
    int expected_layer = dump.manifest.layer_files.begin()->first;
    for (const auto& [layer, file] : dump.manifest.layer_files) {
        if (layer != expected_layer++) {
            throw DataError(fmt::format("manifest: layer range is not contiguous at layer {}", layer));
        }
        auto matrix = read_layer_file(dir / file, layer, dump.manifest.prompt_ids);
        if (matrix.dim() != dump.manifest.dim) {
            throw DataError(fmt::format("layer {}: dimension {} but manifest says {}", layer, matrix.dim(),
                                        dump.manifest.dim));
        }
        matrix.validate_rows();
        dump.layers.push_back(std::move(matrix));
    }
    return dump;
}

SplitPlan make_split(const DatasetManifest& manifest, std::size_t n_fit, std::uint64_t seed, Ordering direction,
                     std::size_t holdout) {
    std::vector<std::string> pool = manifest.group(Role::normative_fit);
    if (seed != 0) {
        random::Engine rng(seed);
        random::shuffle(pool, rng);
    }

    SplitPlan plan;
    plan.ordering_seed = seed;
    plan.ordering_direction = direction;

    const auto& labelled_eval = manifest.group(Role::normative_eval);
    if (!labelled_eval.empty()) {
        plan.eval_ids[Role::normative_eval] = labelled_eval;
    } else {
        if (holdout == 0 || holdout >= pool.size()) {
            throw UsageError(fmt::format(
                "no normative_eval group; need 0 < holdout < {} normative prompts, got holdout {}", pool.size(),
                holdout));
        }
        plan.eval_ids[Role::normative_eval].assign(pool.end() - static_cast<std::ptrdiff_t>(holdout), pool.end());
        pool.resize(pool.size() - holdout);
    }

    if (n_fit == 0 || n_fit > pool.size()) {
        throw UsageError(fmt::format("n_fit {} exceeds the normative fit pool of {}", n_fit, pool.size()));
    }
    if (direction == Ordering::forward) {
        plan.fit_ids.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_fit));
    } else {
        plan.fit_ids.assign(pool.rbegin(), pool.rbegin() + static_cast<std::ptrdiff_t>(n_fit));
    }
    plan.eval_ids[Role::harmful] = manifest.group(Role::harmful);
    plan.eval_ids[Role::benign_aggressive] = manifest.group(Role::benign_aggressive);
    return plan;
}

} // namespace thetaguard
