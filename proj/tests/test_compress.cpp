#include <doctest.h>

#include <map>
#include <set>

#include "oracles.hpp"
#include "sstlm/compress.hpp"

using namespace sstlm;

TEST_CASE("partition: interval boundaries") {
    auto spans = partition(1024, 512);
    REQUIRE(spans.size() == 2);
    CHECK(spans[0].begin == 0);
    CHECK(spans[0].end == 512);
    CHECK(spans[1].begin == 512);
    CHECK(spans[1].end == 1024);

    auto one = partition(512, 512);
    REQUIRE(one.size() == 1);
    CHECK(one[0].len() == 512);

    auto tail = partition(1300, 512);
    REQUIRE(tail.size() == 3);
    CHECK(tail[0].len() == 512);
    CHECK(tail[1].len() == 512);
    CHECK(tail[2].len() == 276);

    CHECK_THROWS_AS(partition(0, 512), ValueError);
}

TEST_CASE("partition: length law over random cases") {
    Rng rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        const int64_t n = rng.uniform_int(1, 5000);
        const int64_t w = rng.uniform_int(1, 700);
        auto spans = partition(n, w);
        CHECK(static_cast<int64_t>(spans.size()) == (n + w - 1) / w);
        int64_t covered = 0;
        int64_t expected_begin = 0;
        for (const auto& span : spans) {
            CHECK(span.begin == expected_begin);  // contiguous cover
            covered += span.len();
            expected_begin = span.end;
        }
        CHECK(covered == n);
    }
}

TEST_CASE("interleave: counts and layouts") {
    std::vector<int32_t> content(512, 40);
    auto [tokens, layout] = interleave_sst(512, 4, /*sst_id=*/1, content);
    CHECK(layout.sst_count == 128);
    CHECK(static_cast<int64_t>(tokens.size()) == 640);

    std::vector<int32_t> four = {50, 51, 52, 53};
    auto [densest, dense_layout] = interleave_sst(4, 1, 1, four);
    CHECK(dense_layout.sst_count == 4);
    const std::vector<int32_t> expected = {50, 1, 51, 1, 52, 1, 53, 1};
    CHECK(densest == expected);

    std::vector<int32_t> tail(276, 40);
    auto [_, tail_layout] = interleave_sst(276, 8, 1, tail);
    // Direct count: 34 full groups of 8 plus one partial group of 4.
    int64_t full_groups = 276 / 8;
    int64_t expected_ssts = full_groups + ((276 % 8) ? 1 : 0);
    CHECK(expected_ssts == 35);
    CHECK(tail_layout.sst_count == 35);

    CHECK_THROWS_AS(interleave_sst(0, 4, 1, std::span<const int32_t>{}), ValueError);
}

TEST_CASE("interleave: layout/sequence consistency property") {
    Rng rng(37);
    for (int trial = 0; trial < 100; ++trial) {
        const int64_t w = rng.uniform_int(1, 600);
        const int64_t ratio = rng.uniform_int(1, 16);
        std::vector<int32_t> content(static_cast<size_t>(w));
        for (auto& t : content) t = static_cast<int32_t>(rng.uniform_int(32, 63));
        auto [tokens, layout] = interleave_sst(w, ratio, 1, content);

        CHECK(layout.sst_count == (w + ratio - 1) / ratio);
        CHECK(static_cast<int64_t>(tokens.size()) == w + layout.sst_count);
        std::set<int64_t> slots(layout.slots.begin(), layout.slots.end());
        CHECK(static_cast<int64_t>(slots.size()) == layout.sst_count);
        int64_t prev = -1;
        for (int64_t s : layout.slots) {
            CHECK(s > prev);  // strictly increasing
            prev = s;
        }
        for (int64_t i = 0; i < static_cast<int64_t>(tokens.size()); ++i) {
            if (slots.count(i))
                CHECK(tokens[static_cast<size_t>(i)] == 1);
            else
                CHECK(tokens[static_cast<size_t>(i)] != 1);
        }
        // Removing summary slots recovers the content verbatim.
        std::vector<int32_t> recovered;
        for (int64_t i = 0; i < static_cast<int64_t>(tokens.size()); ++i)
            if (!slots.count(i)) recovered.push_back(tokens[static_cast<size_t>(i)]);
        CHECK(recovered == content);
    }
}

TEST_CASE("compression-ratio law: divisible lengths compress exactly n/ratio") {
    for (int64_t ratio : {2, 4, 8}) {
        const int64_t w = 512, n = 4096;
        int64_t total_ssts = 0;
        for (const auto& span : partition(n, w)) {
            total_ssts += make_sst_layout(0, span.len(), ratio).sst_count;
        }
        CHECK(total_ssts == n / ratio);
    }
}

TEST_CASE("sample_ratio: stage pools and fixed mode") {
    auto schedule = CurriculumSchedule::defaults();
    Rng rng(41);
    const int64_t total = 1000;
    for (int i = 0; i < 200; ++i) {
        const int64_t early = sample_ratio(schedule, 100, total, rng);
        CHECK((early == 2 || early == 4));
        const int64_t late = sample_ratio(schedule, 900, total, rng);
        CHECK((late == 2 || late == 4 || late == 8));
    }

    CurriculumSchedule fixed;
    CurriculumSchedule::parse_mode("fixed:8", fixed);
    CHECK(fixed.mode == ScheduleMode::Fixed);
    for (int i = 0; i < 10; ++i) CHECK(sample_ratio(fixed, i, 100, rng) == 8);

    CurriculumSchedule no_random;
    CurriculumSchedule::parse_mode("no_random:4", no_random);
    CHECK(no_random.fixed_ratio == 4);

    CHECK_THROWS_AS(sample_ratio(schedule, 1000, total, rng), ValueError);  // step out of range
    CurriculumSchedule bad;
    CHECK_THROWS_AS(CurriculumSchedule::parse_mode("sometimes:3", bad), ConfigError);
}

TEST_CASE("sample_ratio: per-stage uniformity within 5% absolute over 1e4 draws") {
    auto schedule = CurriculumSchedule::defaults();
    const int64_t total = 100;
    Rng rng(43);
    std::map<int64_t, int64_t> early_counts, late_counts;
    const int64_t draws = 10000;
    for (int64_t i = 0; i < draws; ++i) {
        early_counts[sample_ratio(schedule, 10, total, rng)]++;
        late_counts[sample_ratio(schedule, 90, total, rng)]++;
    }
    REQUIRE(early_counts.size() == 2);
    for (const auto& [ratio, count] : early_counts)
        CHECK(std::abs(static_cast<double>(count) / draws - 0.5) < 0.05);
    REQUIRE(late_counts.size() == 3);
    for (const auto& [ratio, count] : late_counts)
        CHECK(std::abs(static_cast<double>(count) / draws - 1.0 / 3.0) < 0.05);
}

TEST_CASE("baseline_compress: pooling examples") {
    auto x = Tensor<float>::from({2, 2}, {1, 1, 3, 3});
    auto avg = baseline_compress({BaselineKind::AvgPool, 2}, x);
    REQUIRE(avg.shape() == Shape{1, 2});
    CHECK(avg.values()[0] == doctest::Approx(2));
    CHECK(avg.values()[1] == doctest::Approx(2));

    auto y = Tensor<float>::from({2, 2}, {1, 5, 3, 2});
    auto mx = baseline_compress({BaselineKind::MaxPool, 2}, y);
    CHECK(mx.values()[0] == doctest::Approx(3));
    CHECK(mx.values()[1] == doctest::Approx(5));
}

TEST_CASE("baseline_compress: ratio 1 is the identity for pooling kinds") {
    Rng rng(47);
    std::vector<float> values(7 * 3);
    for (auto& v : values) v = static_cast<float>(rng.normal());
    auto x = Tensor<float>::from({7, 3}, values);
    for (auto kind : {BaselineKind::AvgPool, BaselineKind::MaxPool}) {
        auto out = baseline_compress({kind, 1}, x);
        REQUIRE(out.shape() == x.shape());
        for (size_t i = 0; i < values.size(); ++i)
            CHECK(out.values()[i] == doctest::Approx(values[i]));
    }
}

TEST_CASE("similarity merge: identical pair merges first, oracle on small inputs") {
    // Two identical rows next to each other plus two distinct rows.
    std::vector<double> rows = {1, 0,   // row 0
                                0, 1,   // row 1
                                0, 1,   // row 2 (same as row 1)
                                -1, 0}; // row 3
    auto lens = similarity_merge_plan(rows, 4, 2, 3);
    REQUIRE(lens.size() == 3);
    CHECK(lens[0] == 1);
    CHECK(lens[1] == 2);  // rows 1 and 2 merged
    CHECK(lens[2] == 1);

    // Replay against the exhaustive oracle for several random small inputs.
    Rng rng(53);
    for (int trial = 0; trial < 50; ++trial) {
        const int64_t n = rng.uniform_int(2, 6);
        const int64_t d = rng.uniform_int(1, 4);
        std::vector<std::vector<double>> mat(static_cast<size_t>(n));
        std::vector<double> flat;
        for (auto& row : mat) {
            row.resize(static_cast<size_t>(d));
            for (auto& v : row) {
                v = rng.normal();
                flat.push_back(v);
            }
        }
        const int64_t target = rng.uniform_int(1, n);

        // Oracle: repeatedly merge the best adjacent pair (size-weighted mean).
        std::vector<std::vector<double>> means = mat;
        std::vector<int64_t> counts(means.size(), 1), lens_oracle(means.size(), 1);
        while (static_cast<int64_t>(means.size()) > target) {
            const size_t i = oracles::best_adjacent_pair(means);
            const double wa = static_cast<double>(counts[i]);
            const double wb = static_cast<double>(counts[i + 1]);
            for (size_t j = 0; j < means[i].size(); ++j)
                means[i][j] = (means[i][j] * wa + means[i + 1][j] * wb) / (wa + wb);
            counts[i] += counts[i + 1];
            lens_oracle[i] += lens_oracle[i + 1];
            means.erase(means.begin() + static_cast<int64_t>(i) + 1);
            counts.erase(counts.begin() + static_cast<int64_t>(i) + 1);
            lens_oracle.erase(lens_oracle.begin() + static_cast<int64_t>(i) + 1);
        }
        CHECK(similarity_merge_plan(flat, n, d, target) == lens_oracle);
    }
}

TEST_CASE("similarity merge keeps each output row the mean of its segment") {
    Rng rng(59);
    std::vector<float> values(8 * 3);
    for (auto& v : values) v = static_cast<float>(rng.normal());
    auto x = Tensor<float>::from({8, 3}, values);
    auto out = baseline_compress({BaselineKind::SimilarityMerge, 2}, x);
    REQUIRE(out.dim(0) == 4);

    std::vector<double> rows(values.begin(), values.end());
    auto lens = similarity_merge_plan(rows, 8, 3, 4);
    int64_t at = 0;
    for (size_t g = 0; g < lens.size(); ++g) {
        for (int64_t j = 0; j < 3; ++j) {
            double mean = 0;
            for (int64_t i = 0; i < lens[g]; ++i) mean += values[(at + i) * 3 + j];
            mean /= static_cast<double>(lens[g]);
            CHECK(out.values()[static_cast<int64_t>(g) * 3 + j] == doctest::Approx(mean));
        }
        at += lens[g];
    }
}
