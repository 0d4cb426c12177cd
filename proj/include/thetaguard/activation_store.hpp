#pragma once

#include "thetaguard/linalg.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace thetaguard {

enum class Role { normative_fit, normative_eval, harmful, benign_aggressive };

inline constexpr std::array<Role, 4> kAllRoles = {Role::normative_fit, Role::normative_eval, Role::harmful,
                                                  Role::benign_aggressive};

std::string_view to_string(Role role);
Role role_from_string(std::string_view name);

// Last-token residual activations of one layer, one float32 row per prompt.
// Immutable once constructed.
class ActivationMatrix {
public:
    ActivationMatrix() = default;
    ActivationMatrix(int layer_index, std::size_t dim, std::vector<float> values,
                     std::vector<std::string> prompt_ids);

    int layer_index() const noexcept { return layer_index_; }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t rows() const noexcept { return prompt_ids_.size(); }
    const std::vector<std::string>& prompt_ids() const noexcept { return prompt_ids_; }
    std::span<const float> values() const noexcept { return values_; }
    std::span<const float> row(std::size_t r) const noexcept { return {values_.data() + r * dim_, dim_}; }

    // Throws DataError naming the layer and prompt for NaN/Inf or all-zero rows.
    void validate_rows() const;

    // Selected rows widened to double, in the order given.
    Matrix to_matrix(std::span<const std::size_t> row_indices) const;

    bool operator==(const ActivationMatrix&) const = default;

private:
    int layer_index_ = 0;
    std::size_t dim_ = 0;
    std::vector<float> values_;
    std::vector<std::string> prompt_ids_;
};

struct DatasetManifest {
    std::string model_id;
    int num_layers = 0;
    std::size_t dim = 0;
    std::map<Role, std::vector<std::string>> groups;
    std::map<Role, std::string> source_corpus;
    // Free-form record of the prompt template used at extraction ("none", "chat", ...).
    std::string prompt_template = "none";
    std::string layer_convention = "0 = output of first block";
    // Row order of every layer file. Defaults to the groups concatenated in role order.
    std::vector<std::string> prompt_ids;
    std::map<int, std::string> layer_files;

    std::size_t n_fit() const;
    const std::vector<std::string>& group(Role role) const;

    // Role sets disjoint, ids unique, every grouped id present in prompt_ids.
    void validate() const;

    bool operator==(const DatasetManifest&) const = default;
};

struct Dump {
    std::vector<ActivationMatrix> layers;
    DatasetManifest manifest;

    const ActivationMatrix& layer(int index) const;
    std::vector<int> layer_indices() const;
    // Row positions of the given prompt ids; throws DataError on unknown ids.
    std::vector<std::size_t> rows_of(std::span<const std::string> ids) const;
};

inline constexpr std::uint16_t kDumpFormatVersion = 1;
inline constexpr std::string_view kManifestFile = "manifest.json";

// Writes manifest.json and one layer_NNN.bin per matrix under `dir`.
// Output bytes are a pure function of the inputs.
void write_dump(std::span<const ActivationMatrix> matrices, const DatasetManifest& manifest,
                const std::filesystem::path& dir);

Dump read_dump(const std::filesystem::path& dir);

// Single layer file codec, exposed for tools that stream one layer at a time.
void write_layer_file(const ActivationMatrix& matrix, const std::filesystem::path& file);
ActivationMatrix read_layer_file(const std::filesystem::path& file, int layer_index,
                                 std::vector<std::string> prompt_ids);

enum class Ordering { forward, reverse };

std::string_view to_string(Ordering ordering);
Ordering ordering_from_string(std::string_view name);

struct SplitPlan {
    std::vector<std::string> fit_ids;
    std::map<Role, std::vector<std::string>> eval_ids;
    std::uint64_t ordering_seed = 0;
    Ordering ordering_direction = Ordering::forward;
};

// Fit ids are the first n_fit of the normative_fit pool after one seeded
// shuffle (seed 0 keeps manifest order), read front-to-back for forward and
// back-to-front for reverse. Held-out normatives come from the normative_eval
// group, or when that group is empty from the last `holdout` entries of the
// shuffled pool.
SplitPlan make_split(const DatasetManifest& manifest, std::size_t n_fit, std::uint64_t seed,
                     Ordering direction, std::size_t holdout = 0);

} // namespace thetaguard
