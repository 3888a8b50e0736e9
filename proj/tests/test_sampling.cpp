#include "doctest.h"

#include "boxmask/error.hpp"
#include "boxmask/sampling.hpp"

using namespace boxmask;

TEST_SUITE("sampling") {

TEST_CASE("uniform sampling of eight frames with T = 4") {
    const SamplingPlan plan{SamplingMode::uniform, 4, 1, 2};
    CHECK(sample_support(8, 3, plan) == std::vector<int>{0, 2, 5, 7});
}

TEST_CASE("strided sampling clamps at the start of the video") {
    const SamplingPlan plan{SamplingMode::strided, 4, 2, 2};
    CHECK(sample_support(10, 1, plan) == std::vector<int>{0, 0, 3, 5});
}

TEST_CASE("a single-frame video replicates frame zero") {
    for (SamplingMode mode : {SamplingMode::uniform, SamplingMode::strided}) {
        for (int t : {1, 4, 14}) {
            const auto idx = sample_support(1, 0, SamplingPlan{mode, t, 3, 2});
            CHECK(idx.size() == static_cast<std::size_t>(t));
            CHECK(std::all_of(idx.begin(), idx.end(), [](int i) { return i == 0; }));
        }
    }
    Rng rng(0);
    const auto train = sample_training_support(1, 0, SamplingPlan{}, rng);
    CHECK(train == std::vector<int>{0, 0});
}

TEST_CASE("output has length T and stays in range") {
    for (SamplingMode mode : {SamplingMode::uniform, SamplingMode::strided}) {
        for (int len : {1, 2, 5, 16, 33}) {
            for (int t = 0; t <= 15; ++t) {
                for (int s : {1, 3, 7}) {
                    for (int target = 0; target < len; target += 3) {
                        const auto idx = sample_support(len, target, SamplingPlan{mode, t, s, 2});
                        CHECK(idx.size() == static_cast<std::size_t>(t));
                        for (int i : idx) {
                            CHECK(i >= 0);
                            CHECK(i < len);
                        }
                    }
                }
            }
        }
    }
}

TEST_CASE("uniform sampling does not depend on the target") {
    const SamplingPlan plan{SamplingMode::uniform, 14, 1, 2};
    const auto first = sample_support(40, 0, plan);
    for (int target = 1; target < 40; ++target) {
        CHECK(sample_support(40, target, plan) == first);
    }
    CHECK(first.front() == 0);
    CHECK(first.back() == 39);
}

TEST_CASE("strided sampling is symmetric around an interior target") {
    const auto idx = sample_support(100, 50, SamplingPlan{SamplingMode::strided, 6, 5, 2});
    CHECK(idx == std::vector<int>{35, 40, 45, 55, 60, 65});
}

TEST_CASE("training draws are deterministic for a fixed seed") {
    const SamplingPlan plan{SamplingMode::uniform, 14, 1, 5};
    Rng a(42, "train");
    Rng b(42, "train");
    for (int i = 0; i < 20; ++i) {
        const auto x = sample_training_support(12, i % 12, plan, a);
        CHECK(x == sample_training_support(12, i % 12, plan, b));
        CHECK(x.size() == 5u);
        for (int v : x) {
            CHECK(v >= 0);
            CHECK(v < 12);
        }
    }
}

TEST_CASE("targets outside the video are rejected") {
    const SamplingPlan plan;
    Rng rng(0);
    CHECK_THROWS_AS(sample_support(8, 8, plan), InvalidArgument);
    CHECK_THROWS_AS(sample_support(8, -1, plan), InvalidArgument);
    CHECK_THROWS_AS(sample_training_support(8, 9, plan, rng), InvalidArgument);
    CHECK_THROWS_AS(sample_support(8, 0, SamplingPlan{SamplingMode::strided, 2, 0, 2}), InvalidArgument);
    CHECK_THROWS_AS(parse_sampling_mode("random"), InvalidArgument);
    CHECK(parse_sampling_mode(to_string(SamplingMode::strided)) == SamplingMode::strided);
}

}
