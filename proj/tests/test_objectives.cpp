#include <gtest/gtest.h>

#include <cmath>

#include "iwgt/objectives.hpp"

using namespace iwgt;

namespace {

ChannelMatrix symmetric2(double direct, double cross) {
    return channel_from_power_gains(2, {direct, cross, cross, direct});
}

} // namespace

TEST(Sinr, SingleLinkNoInterference) {
    const auto H = channel_from_power_gains(1, {1.0});
    const std::vector<double> p{1.0};
    EXPECT_DOUBLE_EQ(sinr(H, p, 1.0)[0], 1.0);
    EXPECT_DOUBLE_EQ(rates(H, p, 1.0)[0], 1.0);
}

TEST(Sinr, SymmetricPair) {
    const std::vector<double> p{1.0, 1.0};
    const auto s = sinr(symmetric2(1.0, 0.5), p, 1.0);
    EXPECT_NEAR(s[0], 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(s[1], 2.0 / 3.0, 1e-15);
    const auto r = rates(symmetric2(1.0, 0.5), p, 1.0);
    EXPECT_NEAR(r[0], std::log2(5.0 / 3.0), 1e-15);
    EXPECT_NEAR(r[0], 0.73697, 1e-5);
}

TEST(Sinr, ZeroPowerGivesZero) {
    const std::vector<double> p{0.0, 0.0};
    for (double v : sinr(symmetric2(1.0, 0.5), p, 1.0)) EXPECT_EQ(v, 0.0);
    for (double v : rates(symmetric2(1.0, 0.5), p, 1.0)) EXPECT_EQ(v, 0.0);
}

TEST(Sinr, RejectsNonFiniteChannelAndBadNoise) {
    auto H = symmetric2(1.0, 0.5);
    const std::vector<double> p{1.0, 1.0};
    EXPECT_THROW(sinr(H, p, 0.0), InvalidArgument);
    H(0, 1) = std::numeric_limits<double>::infinity();
    EXPECT_THROW(sinr(H, p, 1.0), InvalidArgument);
}

TEST(Utility, TabulatedValues) {
    const std::vector<double> r{1, 2, 3};
    EXPECT_EQ(utility(r, SumRate{}), 6.0);
    const std::vector<double> good{0.5}, bad{0.1};
    EXPECT_NEAR(utility(good, QoS{0.3, 15}), 0.5, 1e-12);
    EXPECT_NEAR(utility(bad, QoS{0.3, 15}), -2.9, 1e-12);
    const std::vector<double> ones{1, 1};
    EXPECT_EQ(utility(ones, ProportionalFairness{1e-6}), 0.0);
}

TEST(Utility, PfFloorsZeroRate) {
    const std::vector<double> r{0.0, 1.0};
    EXPECT_NEAR(utility(r, ProportionalFairness{1e-6}), std::log(1e-6), 1e-12);
}

TEST(Utility, NonDecreasingInEachRate) {
    const std::vector<Objective> objs{SumRate{}, ProportionalFairness{}, QoS{}};
    const std::vector<double> base{0.05, 0.3, 0.7, 2.5};
    for (const auto& obj : objs)
        for (std::size_t k = 0; k < base.size(); ++k)
            for (double dr : {1e-9, 1e-3, 0.5}) {
                auto up = base;
                up[k] += dr;
                EXPECT_GE(utility(up, obj), utility(base, obj)) << objective_name(obj);
            }
}

TEST(Sinr, MonotoneInOwnPowerAntitoneInOthers) {
    const auto H = channel_from_power_gains(3, {1.0, 0.2, 0.1, 0.3, 0.8, 0.05, 0.4, 0.6, 1.2});
    const std::vector<double> p{0.5, 0.5, 0.5};
    const auto s0 = sinr(H, p, 0.1);
    for (std::size_t k = 0; k < 3; ++k) {
        auto q = p;
        q[k] += 0.1;
        const auto s1 = sinr(H, q, 0.1);
        for (std::size_t j = 0; j < 3; ++j) {
            if (j == k) {
                EXPECT_GT(s1[j], s0[j]);
            } else {
                EXPECT_LE(s1[j], s0[j]);
            }
        }
    }
}

TEST(Sinr, ScaleInvariant) {
    const auto H = channel_from_power_gains(3, {1.0, 0.2, 0.1, 0.3, 0.8, 0.05, 0.4, 0.6, 1.2});
    const std::vector<double> p{0.2, 0.7, 0.4};
    const double c = 1e-4;
    ChannelMatrix Hc = H;
    for (auto& h : Hc.data) h *= c;
    const auto a = sinr(H, p, 0.3), b = sinr(Hc, p, 0.3 * c * c);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(b[k] / a[k], 1.0, 1e-12);
}

TEST(NormalizedRatio, Values) {
    EXPECT_EQ(normalized_ratio(6.0, 6.0), 1.0);
    EXPECT_EQ(normalized_ratio(3.0, 6.0), 0.5);
    // QoS ratios can exceed one when the reference is penalized.
    EXPECT_NEAR(normalized_ratio(-1.0, -0.4), 2.5, 1e-15);
    EXPECT_THROW(normalized_ratio(1.0, 0.0), UndefinedRatio);
}

TEST(NormalizedRatio, RatioOfMeans) {
    const std::vector<double> model{1.0, 3.0}, ref{4.0, 4.0};
    EXPECT_DOUBLE_EQ(normalized_ratio(model, ref), 0.5);
    const std::vector<double> m2{1.0, -1.0}, r2{1.0, -1.0};
    EXPECT_THROW(normalized_ratio(m2, r2), UndefinedRatio);
}

TEST(Objective, NamesRoundTrip) {
    for (const std::string n : {"sumrate", "pf", "qos"}) EXPECT_EQ(objective_name(parse_objective(n)), n);
    EXPECT_THROW(parse_objective("maxmin"), ConfigError);
}

TEST(Objective, ValidationRejectsBadParameters) {
    EXPECT_THROW(validate(QoS{0.3, 0.5}), InvalidArgument);
    EXPECT_THROW(validate(QoS{0.0, 15}), InvalidArgument);
    EXPECT_THROW(validate(ProportionalFairness{0.0}), InvalidArgument);
    EXPECT_NO_THROW(validate(QoS{}));
}
