#include <catch_amalgamated.hpp>

#include <filesystem>

#include "relkd/config.hpp"
#include "relkd/io.hpp"

using namespace relkd;
using json = nlohmann::ordered_json;

TEST_CASE("empty config takes the defaults") {
  const auto c = parse_config(json::object());
  CHECK(c.train.epochs == 30);
  CHECK(c.train.batch_size == 64);
  CHECK(c.train.peak_lr == 1e-3);
  CHECK(c.train.weights.alpha == 2000.0);
  CHECK(c.train.enabled == LossSet::clip_rd());
  CHECK(c.data.n_concepts == 200);
  CHECK(c.data.samples_per_concept == 50);
  CHECK(c.embed_dim == 32);
  CHECK(c.temperatures.cross.tau == 0.07);
}

TEST_CASE("config overrides and method naming") {
  const auto c = parse_config(json::parse(R"({
    "seed": 7,
    "data": {"n_concepts": 5, "seed": 3},
    "loss": {"enabled": ["FD", "ICL", "HRD"], "temperatures": {"cross": 0.2, "image": {"init": 0.1, "learnable": false}}},
    "train": {"betas": [0.8, 0.9]}
  })"));
  CHECK(c.seed == 7);
  CHECK(c.data_spec().seed == 3);
  CHECK(c.train.enabled == LossSet::clip_kd());
  CHECK(c.temperatures.cross.tau == 0.2);
  CHECK_FALSE(c.temperatures.image.learnable);
  CHECK(c.train.beta1 == 0.8);
  CHECK(c.distill_config().method == "KD");
  CHECK(c.distill_config().run_id == "KD-s7");
  CHECK(c.distill_config().train.seed == 7);

  const auto d = parse_config(json::parse(R"({"seed": 4})"));
  CHECK(d.data_spec().seed == 4);
  CHECK(RunConfig::method_name(LossSet{true, true, true, false, true}) == "KD+XRD");
  CHECK(RunConfig::method_name(LossSet{true, false, false, true, false}) == "FD+VRD");
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(parse_config(json::parse(R"({"sed": 1})")), ConfigError);
  CHECK_THROWS_AS(parse_config(json::parse(R"({"train": {"epoch": 1}})")), ConfigError);
  CHECK_THROWS_AS(parse_config(json::parse(R"({"loss": {"enabled": ["CRD"]}})")), ConfigError);
  CHECK_THROWS_AS(parse_config(json::parse(R"({"loss": {"alpha": -1}})")), ConfigError);
  CHECK_THROWS_AS(parse_config(json::parse(R"({"seed": "x"})")), ConfigError);
  CHECK_THROWS_AS(parse_config(json::parse(R"({"loss": {"temperatures": {"task": {"init": 0}}}})")), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("config snapshot round-trips") {
  const auto c = parse_config(json::parse(R"({"seed": 9, "data": {"noise_sigma": 0.5, "seed": 2},
                                              "loss": {"enabled": ["FD", "VRD"], "lambda": 0.5}})"));
  const auto back = parse_config(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(back.data_spec().seed == 2);
  CHECK(back.train.weights.lambda == 0.5);
}

TEST_CASE("checkpoint round-trip preserves weights and temperatures") {
  Checkpoint c{init_dual_encoder(5, 4, 6, 3, 2, Network::student), TemperatureSet::initial(0.05, 0.03),
               {"RD", 11, 30}};
  c.temperatures.cross.value = Tensor::scalar(1.0 / 3.0);
  const auto path = std::filesystem::temp_directory_path() / "relkd_tests" / "ckpt.json";
  save_checkpoint(path, c);
  const auto back = load_checkpoint(path);
  CHECK(back.model.network == Network::student);
  CHECK(back.model.image.projection.value == c.model.image.projection.value);
  CHECK(back.model.text.layers[1].weight.value == c.model.text.layers[1].weight.value);
  CHECK(back.temperatures.cross.value == c.temperatures.cross.value);
  CHECK(back.temperatures.teacher_tau == 0.03);
  CHECK(back.meta.method == "RD");
  CHECK(back.meta.seed == 11);
  CHECK(back.meta.epochs_trained == 30);
  CHECK_THROWS_AS(teacher_from_checkpoint(back), DataError);
  CHECK_THROWS_AS(load_checkpoint(path.string() + ".missing"), DataError);
}

TEST_CASE("number formatting is shortest round-trip") {
  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(0.1 + 0.2) == "0.30000000000000004");
  CHECK(format_number(2005.0) == "2005");
  CHECK(std::stod(format_number(1.0 / 3.0)) == 1.0 / 3.0);
  CHECK(format_optional(std::nullopt).empty());
}

TEST_CASE("metrics csv layout") {
  const std::string header = metrics_header();
  CHECK(header ==
        "run_id,method,seed,epoch,loss_task,loss_fd,loss_icl,loss_hrd,loss_vrd_ce,loss_vrd_kl,loss_xrd,loss_total,"
        "val_i2t_r1,val_t2i_r1,val_i2t_r5,val_t2i_r5,zs_acc,pos_mean,neg_mean,gap,mi_bound_image,mi_bound_text\n");
  MetricRecord r;
  r.run_id = "KD-s0";
  r.method = "KD";
  r.losses.task = 1.5;
  r.losses.fd = 0.25;
  r.losses.total = 2.0;
  const std::string row = metrics_row(r);
  CHECK(row.rfind("KD-s0,KD,0,0,1.5,0.25,,,,,,2,", 0) == 0);
  CHECK(std::count(row.begin(), row.end(), ',') == 21);
  CHECK(row.back() == '\n');
}

TEST_CASE("atomic writes replace the target") {
  const auto path = std::filesystem::temp_directory_path() / "relkd_tests" / "atomic" / "f.txt";
  write_file_atomic(path, "one");
  write_file_atomic(path, "two");
  CHECK(read_file(path) == "two");
  CHECK_FALSE(std::filesystem::exists(path.string() + ".tmp"));
}
