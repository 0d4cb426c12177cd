#include "support.hpp"

#include "thetaguard/activation_store.hpp"
#include "thetaguard/errors.hpp"

#include <doctest.h>
#include <fmt/format.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

using namespace thetaguard;

namespace {

DatasetManifest small_manifest(std::size_t dim, int layers) {
    DatasetManifest m;
    m.model_id = "toy";
    m.num_layers = layers;
    m.dim = dim;
    m.groups[Role::normative_fit] = {"n0", "n1", "n2", "n3"};
    m.groups[Role::normative_eval] = {"e0", "e1"};
    m.groups[Role::harmful] = {"h0", "h1"};
    m.groups[Role::benign_aggressive] = {"b0"};
    for (const auto& [role, ids] : m.groups) {
        m.source_corpus[role] = "toy-corpus";
    }
    return m;
}

std::vector<std::string> all_ids(const DatasetManifest& m) {
    std::vector<std::string> ids;
    for (Role r : kAllRoles) {
        const auto& g = m.group(r);
        ids.insert(ids.end(), g.begin(), g.end());
    }
    return ids;
}

std::vector<ActivationMatrix> random_layers(const DatasetManifest& m, std::uint64_t seed) {
    random::Engine rng(seed);
    const auto ids = all_ids(m);
    std::vector<ActivationMatrix> out;
    for (int l = 0; l < m.num_layers; ++l) {
        std::vector<float> v(ids.size() * m.dim);
        for (auto& x : v) {
            x = static_cast<float>(random::standard_normal(rng));
        }
        out.emplace_back(l, m.dim, std::move(v), ids);
    }
    return out;
}

} // namespace

TEST_CASE("write then read is bitwise identical") {
    testing::TempDir dir;
    const auto m = small_manifest(5, 3);
    const auto layers = random_layers(m, 11);
    write_dump(layers, m, dir.path());
    const Dump d = read_dump(dir.path());
    REQUIRE(d.layers.size() == 3);
    for (std::size_t l = 0; l < 3; ++l) {
        CHECK(d.layers[l] == layers[l]);
        CHECK(std::memcmp(d.layers[l].values().data(), layers[l].values().data(),
                          layers[l].values().size_bytes()) == 0);
    }
    CHECK(d.manifest.model_id == "toy");
    CHECK(d.manifest.n_fit() == 4);
    CHECK(d.manifest.groups == m.groups);
    CHECK(d.manifest.source_corpus == m.source_corpus);
    CHECK(d.manifest.prompt_ids == all_ids(m));
}

TEST_CASE("identical inputs give identical bytes") {
    testing::TempDir a;
    testing::TempDir b;
    const auto m = small_manifest(4, 2);
    const auto layers = random_layers(m, 5);
    write_dump(layers, m, a.path());
    write_dump(layers, m, b.path());
    for (const char* f : {"manifest.json", "layer_000.bin", "layer_001.bin"}) {
        CHECK(testing::slurp(a / f) == testing::slurp(b / f));
    }
}

TEST_CASE("layer file header layout") {
    testing::TempDir dir;
    const ActivationMatrix m(0, 3, {1.0f, 2.0f, 3.0f, -1.0f, 0.5f, 4.0f}, {"p", "q"});
    write_layer_file(m, dir / "x.bin");
    const std::string bytes = testing::slurp(dir / "x.bin");
    REQUIRE(bytes.size() == 4 + 2 + 4 + 4 + 6 * 4);
    CHECK(bytes.substr(0, 4) == "LBIO");
    CHECK(static_cast<unsigned char>(bytes[4]) == 1);
    CHECK(static_cast<unsigned char>(bytes[5]) == 0);
    CHECK(static_cast<unsigned char>(bytes[6]) == 2);  // rows, little endian
    CHECK(static_cast<unsigned char>(bytes[10]) == 3); // dim
    float first = 0.0f;
    std::memcpy(&first, bytes.data() + 14, 4);
    CHECK(first == 1.0f);
    const auto back = read_layer_file(dir / "x.bin", 0, {"p", "q"});
    CHECK(back == m);
}

TEST_CASE("all-zero rows are rejected on write") {
    testing::TempDir dir;
    DatasetManifest m;
    m.model_id = "zeros";
    m.num_layers = 1;
    m.dim = 4;
    m.groups[Role::normative_fit] = {"a", "b"};
    const ActivationMatrix zeros(0, 4, std::vector<float>(8, 0.0f), {"a", "b"});
    CHECK_THROWS_AS(write_dump(std::span(&zeros, 1), m, dir.path()), DataError);
}

TEST_CASE("NaN entry is reported with layer and prompt") {
    testing::TempDir dir;
    const auto m = small_manifest(4, 2);
    auto layers = random_layers(m, 3);
    write_dump(layers, m, dir.path());
    // Poison row "h1" (index 7) of layer 1 in place.
    std::fstream f(dir / "layer_001.bin", std::ios::in | std::ios::out | std::ios::binary);
    const float nan = std::numeric_limits<float>::quiet_NaN();
    f.seekp(14 + (7 * 4 + 2) * 4);
    f.write(reinterpret_cast<const char*>(&nan), 4);
    f.close();
    try {
        read_dump(dir.path());
        FAIL("expected DataError");
    } catch (const DataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("layer 1") != std::string::npos);
        CHECK(msg.find("h1") != std::string::npos);
    }
}

TEST_CASE("truncated and mismatched files are rejected") {
    testing::TempDir dir;
    const auto m = small_manifest(4, 1);
    write_dump(random_layers(m, 1), m, dir.path());
    const auto file = dir / "layer_000.bin";
    const std::string bytes = testing::slurp(file);

    SUBCASE("truncated payload") {
        std::ofstream(file, std::ios::binary) << bytes.substr(0, bytes.size() - 3);
        CHECK_THROWS_AS(read_dump(dir.path()), DataError);
    }
    SUBCASE("version mismatch") {
        std::string bad = bytes;
        bad[4] = 2;
        std::ofstream(file, std::ios::binary) << bad;
        CHECK_THROWS_AS(read_dump(dir.path()), DataError);
    }
    SUBCASE("bad magic") {
        std::string bad = bytes;
        bad[0] = 'X';
        std::ofstream(file, std::ios::binary) << bad;
        CHECK_THROWS_AS(read_dump(dir.path()), DataError);
    }
    SUBCASE("trailing bytes") {
        std::ofstream(file, std::ios::binary) << bytes << "xx";
        CHECK_THROWS_AS(read_dump(dir.path()), DataError);
    }
}

TEST_CASE("manifest referencing a missing prompt is rejected") {
    auto m = small_manifest(4, 1);
    m.prompt_ids = all_ids(m);
    m.groups[Role::harmful].push_back("ghost");
    CHECK_THROWS_AS(m.validate(), DataError);
}

TEST_CASE("overlapping roles and duplicate ids are rejected") {
    auto m = small_manifest(4, 1);
    m.groups[Role::harmful].push_back("n0");
    CHECK_THROWS_AS(m.validate(), DataError);

    testing::TempDir dir;
    auto m2 = small_manifest(2, 1);
    const std::vector<std::string> ids = {"n0", "n0", "n2", "n3", "e0", "e1", "h0", "h1", "b0"};
    const ActivationMatrix dup(0, 2, std::vector<float>(ids.size() * 2, 1.0f), ids);
    CHECK_THROWS(write_dump(std::span(&dup, 1), m2, dir.path()));
}

TEST_CASE("dimension mismatch across layers is rejected") {
    testing::TempDir dir;
    auto m = small_manifest(4, 2);
    auto layers = random_layers(m, 2);
    const auto ids = all_ids(m);
    layers[1] = ActivationMatrix(1, 3, std::vector<float>(ids.size() * 3, 1.0f), ids);
    CHECK_THROWS_AS(write_dump(layers, m, dir.path()), DataError);
}

TEST_CASE("non-contiguous layers are rejected") {
    testing::TempDir dir;
    auto m = small_manifest(4, 3);
    auto layers = random_layers(m, 2);
    layers.erase(layers.begin() + 1);
    CHECK_THROWS(write_dump(layers, m, dir.path()));
}

TEST_CASE("full-size dump round-trips") {
    testing::TempDir dir;
    DatasetManifest m;
    m.model_id = "full-size";
    m.num_layers = 24;
    m.dim = 1024;
    const std::pair<Role, std::size_t> sizes[] = {{Role::normative_fit, 200},
                                                  {Role::normative_eval, 520},
                                                  {Role::harmful, 520},
                                                  {Role::benign_aggressive, 250}};
    std::vector<std::string> ids;
    for (const auto& [role, n] : sizes) {
        for (std::size_t i = 0; i < n; ++i) {
            ids.push_back(fmt::format("{}-{}", to_string(role), i));
            m.groups[role].push_back(ids.back());
        }
    }
    REQUIRE(ids.size() == 1490);
    random::Engine rng(24);
    std::vector<ActivationMatrix> layers;
    for (int l = 0; l < 24; ++l) {
        std::vector<float> v(ids.size() * 1024);
        for (auto& x : v) {
            x = static_cast<float>(random::uniform01(rng) * 2.0 - 1.0);
        }
        layers.emplace_back(l, 1024, std::move(v), ids);
    }
    write_dump(layers, m, dir.path());
    const Dump d = read_dump(dir.path());
    REQUIRE(d.layers.size() == 24);
    bool equal = true;
    for (int l = 0; l < 24; ++l) {
        equal = equal && d.layers[static_cast<std::size_t>(l)] == layers[static_cast<std::size_t>(l)];
    }
    CHECK(equal);
    CHECK(d.manifest.n_fit() == 200);

    const SplitPlan plan = make_split(d.manifest, 200, 0, Ordering::forward);
    CHECK(plan.fit_ids.size() == 200);
    CHECK(plan.eval_ids.at(Role::normative_eval).size() == 520);
    const std::set<std::string> fit(plan.fit_ids.begin(), plan.fit_ids.end());
    for (const auto& id : plan.eval_ids.at(Role::normative_eval)) {
        CHECK(fit.count(id) == 0);
    }
}

TEST_CASE("make_split prefix and suffix selection") {
    DatasetManifest m;
    m.groups[Role::normative_fit] = {"a", "b", "c", "d"};
    m.groups[Role::normative_eval] = {"e"};
    m.prompt_ids = {"a", "b", "c", "d", "e"};
    CHECK(make_split(m, 2, 0, Ordering::forward).fit_ids == std::vector<std::string>{"a", "b"});
    CHECK(make_split(m, 2, 0, Ordering::reverse).fit_ids == std::vector<std::string>{"d", "c"});
    CHECK_THROWS_AS(make_split(m, 5, 0, Ordering::forward), UsageError);
    CHECK_THROWS_AS(make_split(m, 0, 0, Ordering::forward), UsageError);
}

TEST_CASE("split properties over seeds") {
    DatasetManifest m;
    for (int i = 0; i < 30; ++i) {
        m.groups[Role::normative_fit].push_back(fmt::format("n{}", i));
    }
    m.groups[Role::harmful] = {"h0", "h1"};
    // Without a labelled held-out group the split must carve one from the pool.
    CHECK_THROWS_AS(make_split(m, 10, 0, Ordering::forward), UsageError);
    DatasetManifest labelled = m;
    labelled.groups[Role::normative_eval] = {"e0", "e1", "e2"};
    for (std::uint64_t seed : {0ull, 1ull, 7ull, 12345ull}) {
        for (std::size_t holdout : {0ul, 10ul}) {
            const DatasetManifest& mm = holdout == 0 ? labelled : m;
            const std::size_t pool = 30 - holdout;
            const auto fwd = make_split(mm, pool, seed, Ordering::forward, holdout);
            const auto rev = make_split(mm, pool, seed, Ordering::reverse, holdout);
            CHECK(std::set(fwd.fit_ids.begin(), fwd.fit_ids.end()) ==
                  std::set(rev.fit_ids.begin(), rev.fit_ids.end()));
            CHECK(make_split(mm, 5, seed, Ordering::forward, holdout).fit_ids ==
                  make_split(mm, 5, seed, Ordering::forward, holdout).fit_ids);
            for (std::size_t n = 1; n <= pool; n += 4) {
                for (Ordering o : {Ordering::forward, Ordering::reverse}) {
                    const auto plan = make_split(mm, n, seed, o, holdout);
                    std::set<std::string> fit(plan.fit_ids.begin(), plan.fit_ids.end());
                    CHECK(fit.size() == n);
                    for (const auto& [role, ids] : plan.eval_ids) {
                        for (const auto& id : ids) {
                            CHECK(fit.count(id) == 0);
                        }
                    }
                    if (holdout > 0) {
                        CHECK(plan.eval_ids.at(Role::normative_eval) == fwd.eval_ids.at(Role::normative_eval));
                    }
                }
            }
        }
    }
    CHECK(make_split(m, 10, 1, Ordering::forward, 5).fit_ids != make_split(m, 10, 2, Ordering::forward, 5).fit_ids);
}

TEST_CASE("role names round-trip") {
    for (Role r : kAllRoles) {
        CHECK(role_from_string(to_string(r)) == r);
    }
    CHECK_THROWS_AS(role_from_string("nope"), DataError);
}
