#include <gtest/gtest.h>

#include "abflow/schedules.hpp"

using namespace abflow;

TEST(Schedules, LinearSingleStep) {
  auto s = make_schedule(ScheduleKind::linear, 1, 0.5, 0.5);
  ASSERT_EQ(s.T(), 1);
  EXPECT_EQ(s.beta(1), 0.5);
  EXPECT_EQ(s.alpha_bar(1), 0.5);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
}

TEST(Schedules, ProductOracle) {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    auto s = make_schedule(kind, 100, 1e-4, 0.05);
    double prod = 1.0;
    for (int t = 1; t <= 100; ++t) {
      prod *= 1.0 - s.beta(t);
      EXPECT_NEAR(s.alpha_bar(t), prod, 1e-12);
      EXPECT_NEAR(s.alpha_bar(t), s.alpha_bar(t - 1) * (1.0 - s.beta(t)), 1e-12);
      EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
      EXPECT_GT(s.beta(t), 0.0);
      EXPECT_LT(s.beta(t), 1.0);
    }
  }
}

TEST(Schedules, LinearEndpointsAndMonotone) {
  auto s = make_schedule(ScheduleKind::linear, 100, 1e-4, 0.05);
  EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta(100), 0.05);
  for (int t = 2; t <= 100; ++t) EXPECT_GT(s.beta(t), s.beta(t - 1));
}

TEST(Schedules, CosineDecaysFully) {
  auto s = make_schedule(ScheduleKind::cosine, 100, 1e-4, 0.999);
  EXPECT_LT(s.alpha_bar(100), 0.01);
  for (int t = 2; t <= 100; ++t) EXPECT_GE(s.beta(t), s.beta(t - 1));
}

TEST(Schedules, RejectsInvalidBounds) {
  EXPECT_THROW(make_schedule(ScheduleKind::linear, 0, 0.1, 0.2), std::invalid_argument);
  EXPECT_THROW(make_schedule(ScheduleKind::linear, 10, 0.0, 0.2), std::invalid_argument);
  EXPECT_THROW(make_schedule(ScheduleKind::linear, 10, 0.3, 0.2), std::invalid_argument);
  EXPECT_THROW(make_schedule(ScheduleKind::linear, 10, 0.1, 1.0), std::invalid_argument);
  EXPECT_THROW(parse_schedule_kind("quadratic"), std::invalid_argument);
}

TEST(Schedules, DigestTracksBetas) {
  auto a = make_schedule(ScheduleKind::linear, 50, 1e-4, 0.05);
  auto b = make_schedule(ScheduleKind::linear, 50, 1e-4, 0.05);
  auto c = make_schedule(ScheduleKind::linear, 50, 1e-4, 0.06);
  EXPECT_EQ(a.digest(), b.digest());
  EXPECT_NE(a.digest(), c.digest());
  EXPECT_EQ(a.digest().size(), 16u);
}

TEST(Schedules, SetSharesT) {
  auto set = make_schedule_set(20, {ScheduleKind::linear, 1e-4, 0.1}, {}, {ScheduleKind::cosine, 1e-4, 0.05});
  EXPECT_EQ(set.T(), 20);
  EXPECT_EQ(set.type.T(), 20);
  EXPECT_EQ(set.ori.channel(), Channel::ori);
}
