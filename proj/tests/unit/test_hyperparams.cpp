#include <doctest.h>

#include <cmath>

#include <filesystem>

#include "flm/error.hpp"
#include "flm/hyperparams.hpp"

using namespace flm;

TEST_SUITE("hyperparams") {
  TEST_CASE("defaults are the published training values") {
    const HyperParams hp;
    CHECK(hp.matrix_lr == 1.5e-4);
    CHECK(hp.min_lr == 1.5e-5);
    CHECK(hp.output_mult == 3.125e-2);
    CHECK(hp.batch_tokens / 4096 == 1344);
    CHECK(hp.batch_tokens % 4096 == 0);
    CHECK_NOTHROW(validate(hp));
  }

  TEST_CASE("json round trip") {
    HyperParams hp;
    hp.vector_lr = 0.01;
    hp.output_mult = 4.0;
    hp.warmup_steps = 50;
    const nlohmann::json j = hp;
    for (const char* key : {"learning_rate", "matrix_learning_rate", "minimum_learning_rate", "standard_deviation",
                            "matrix_standard_deviation", "input_mult", "output_mult", "lr_schedule_type",
                            "lr_schedule_tokens", "warmup_step", "clip_grad", "weight_decay",
                            "batch_size_tokens", "rope_theta"}) {
      CHECK_MESSAGE(j.contains(key), key);
    }
    CHECK(j.get<HyperParams>().same_values(hp));
    const auto path = std::filesystem::temp_directory_path() / "flm_test_hp.json";
    save_hyperparams(hp, path.string());
    CHECK(load_hyperparams(path.string()).same_values(hp));
    std::filesystem::remove(path);
  }

  TEST_CASE("rejects unknown fields and bad values") {
    nlohmann::json j = HyperParams{};
    j["lr"] = 0.1;
    CHECK_THROWS_AS(j.get<HyperParams>(), ConfigError);
    HyperParams hp;
    hp.matrix_lr = -1.0;
    CHECK_THROWS_AS(validate(hp), ConfigError);
    hp = {};
    hp.min_lr = 1.0;
    CHECK_THROWS_AS(validate(hp), ConfigError);
    CHECK_THROWS_AS(load_hyperparams("/nonexistent/hp.json"), ConfigError);
  }

  TEST_CASE("zero learning rates are valid") {
    HyperParams hp;
    hp.vector_lr = hp.matrix_lr = hp.min_lr = 0.0;
    CHECK_NOTHROW(validate(hp));
    hp.vector_lr = std::nan("");
    CHECK_THROWS_AS(validate(hp), ConfigError);
  }
}
