#include <gtest/gtest.h>

#include <chrono>
#include <set>

#include "pipmm/gradcheck.hpp"

using namespace pipmm;

TEST(GradientSuite, EveryCheckPassesWithinBudget) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = gradient_suite();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::set<std::string> modules;
    for (auto& r : res) {
        EXPECT_TRUE(r.passed()) << r.name << " error " << r.error << " tolerance " << r.tolerance;
        modules.insert(r.module);
    }
    EXPECT_EQ(modules, (std::set<std::string>{"tensor_autodiff", "vit_encoder", "text_model", "pip_bridge",
                                               "visual_adapter", "training_harness"}));
    EXPECT_LT(secs, 60.0);
}

TEST(GradientSuite, LinearOpsUseTightTolerance) {
    for (auto& r : gradient_suite(7, 1))
        if (r.name == "matmul" || r.name == "add_bias" || r.name == "project_linear") EXPECT_EQ(r.tolerance, 1e-6);
}
