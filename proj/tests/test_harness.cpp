#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "carn/checkpoint.hpp"
#include "carn/harness.hpp"

using namespace carn;

namespace {

std::vector<Clip> corpus(int clips, std::uint64_t seed) {
  GenConfig g;
  g.n_clips = clips;
  g.seed = seed;
  return generate_corpus(g);
}

TrainConfig small_train(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.threads = 1;
  c.model.d_model = 16;
  c.model.d_ff = 32;
  c.model.naming_hidden = 16;
  return c;
}

std::string metrics_text(const std::vector<MetricsReport>& rows) {
  std::ostringstream out;
  write_metrics_header(out);
  for (const auto& r : rows) write_metrics_row(out, r);
  return out.str();
}

bool same_params(const Model& a, const Model& b) {
  if (a.params().size() != b.params().size()) return false;
  for (int i = 0; i < a.params().size(); ++i) {
    if (a.params().name(i) != b.params().name(i)) return false;
    if (a.params().value(i) != b.params().value(i)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("training lowers the loss on a smoke corpus") {
  const auto data = corpus(10, 3);
  std::vector<EpochStats> curve;
  train(data, small_train(3), [&](const EpochStats& s, const Model&) { curve.push_back(s); });
  REQUIRE(curve.size() == 3);
  CHECK(curve.back().loss < curve.front().loss);
  for (const auto& s : curve) {
    CHECK(s.loss == doctest::Approx(s.cross_entropy + s.rkl));
    CHECK(s.face_acc >= 0);
    CHECK(s.face_acc <= 1);
  }
}

TEST_CASE("training and evaluation are reproducible") {
  const auto data = corpus(6, 8);
  auto run = [&](int threads) {
    TrainConfig c = small_train(2);
    c.threads = threads;
    Checkpoint ck = train(data, c);
    return metrics_text({evaluate(ck, data, true), evaluate(ck, data, false)});
  };
  const std::string first = run(1);
  CHECK(first == run(1));
  CHECK(first == run(3));
}

TEST_CASE("training input errors") {
  CHECK_THROWS_AS(train({}, small_train(1)), EmptyInputError);
  auto data = corpus(3, 1);
  for (auto& c : data) c.qas.clear();
  CHECK_THROWS_AS(train(data, small_train(1)), EmptyInputError);

  auto mute = corpus(3, 1);
  for (auto& c : mute) c.subtitles.clear();
  CHECK_THROWS_AS(train(mute, small_train(1)), EmptyCastError);

  TrainConfig bad = small_train(1);
  bad.batch_size = 0;
  CHECK_THROWS_AS(train(corpus(2, 1), bad), ConfigError);
  bad = small_train(1);
  bad.learning_rate = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("accuracy bookkeeping") {
  const auto data = corpus(8, 2);
  auto gold = evaluate_with([](const Clip&, const QAItem& qa) { return qa.correct_index; }, data,
                            true);
  CHECK(gold.qa_acc == 1.0);
  CHECK(gold.qa_acc_visual == 1.0);
  CHECK(gold.qa_acc_textual == 1.0);
  CHECK(gold.items == gold.visual_items + gold.textual_items);

  auto zero = evaluate_with([](const Clip&, const QAItem&) { return 0; }, data, false);
  CHECK(zero.qa_acc == static_cast<double>(zero.correct) / static_cast<double>(zero.items));
}

TEST_CASE("an untrained model answers at chance") {
  const auto train_data = corpus(4, 30);
  const auto eval_data = corpus(80, 31);
  Checkpoint ck = train(train_data, small_train(0));
  auto m = evaluate(ck, eval_data, true);
  CHECK(m.items >= 500);
  CHECK(std::abs(m.qa_acc - 0.2) <= 0.05);
}

TEST_CASE("evaluate leaves the checkpoint untouched") {
  const auto data = corpus(5, 4);
  const Checkpoint ck = train(data, small_train(1));
  const Checkpoint copy = ck;
  evaluate(ck, data, true);
  evaluate(ck, data, false);
  CHECK(same_params(ck.model, copy.model));
}

TEST_CASE("checkpoint round trip") {
  const auto data = corpus(5, 6);
  const Checkpoint ck = train(data, small_train(1));
  const auto path = std::filesystem::temp_directory_path() / "carn_test_ckpt.json";
  save_checkpoint(ck, path);
  const Checkpoint back = load_checkpoint(path);
  CHECK(same_params(ck.model, back.model));
  CHECK(back.model.cast() == ck.model.cast());
  CHECK(back.model.config() == ck.model.config());
  CHECK(back.train.modality == ck.train.modality);
  CHECK(config_hash(back.train) == config_hash(ck.train));
  CHECK(metrics_text({evaluate(ck, data, true)}) == metrics_text({evaluate(back, data, true)}));
  std::filesystem::remove(path);
}

TEST_CASE("incompatible corpora are rejected") {
  const auto data = corpus(5, 6);
  const Checkpoint ck = train(data, small_train(0));
  GenConfig other;
  other.n_clips = 2;
  other.d_f = 16;
  CHECK_THROWS_AS(evaluate(ck, generate_corpus(other), true), VocabMismatchError);
  GenConfig strangers;
  strangers.n_clips = 2;
  strangers.principal_names = {"Ann", "Bea", "Cy", "Dov"};
  CHECK_THROWS_AS(evaluate(ck, generate_corpus(strangers), true), VocabMismatchError);
}

TEST_CASE("train config JSON") {
  TrainConfig c = small_train(4);
  c.modality = parse_modality("sub,objs");
  CHECK(to_json(train_config_from_json(to_json(c))) == to_json(c));
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"epoch", 3}}), ConfigError);
  CHECK(train_config_from_json(nlohmann::json{{"epochs", 3}}).epochs == 3);
  c.weight_decay = 0.01;
  CHECK(train_config_from_json(to_json(c)).weight_decay == 0.01);
  c.weight_decay = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(config_hash(c) != config_hash(small_train(5)));
}

TEST_CASE("ablation grid layout and provenance") {
  const auto data = corpus(3, 12);
  TrainConfig base = small_train(1);
  base.model.d_model = 8;
  base.model.d_ff = 8;
  base.model.encoder_layers = 1;
  base.model.decoder_layers = 1;
  const auto dir = std::filesystem::temp_directory_path() / "carn_test_ablate";
  std::filesystem::remove_all(dir);
  auto cells = ablate(data, data, base, ablation_variants(), {true, false}, dir);
  REQUIRE(cells.size() == 18);

  std::ostringstream table;
  write_ablation_table(table, cells);
  std::istringstream lines(table.str());
  std::vector<std::string> rows;
  for (std::string l; std::getline(lines, l);) rows.push_back(l);
  REQUIRE(rows.size() == 10);
  CHECK(rows[0] == "variant,w/ ts,w/o ts");
  CHECK(rows[1].rfind("Sub,", 0) == 0);
  CHECK(rows[9].rfind("Sub + Objs_nm + Rels_nm,", 0) == 0);

  for (std::size_t i = 0; i < cells.size(); i += 5) {
    const Checkpoint ck = load_checkpoint(cells[i].checkpoint);
    const auto again = evaluate(ck, data, cells[i].use_ts);
    CHECK(metrics_text({again}) == metrics_text({cells[i].metrics}));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("metrics CSV columns") {
  MetricsReport m;
  m.variant = "Sub + Objs";
  m.use_ts = false;
  m.qa_acc = 0.5;
  m.seed = 3;
  std::ostringstream out;
  write_metrics_header(out);
  write_metrics_row(out, m);
  CHECK(out.str() ==
        "variant,use_ts,qa_acc,qa_acc_visual,qa_acc_textual,face_acc,seed\n"
        "Sub + Objs,false,0.500000,0.000000,0.000000,0.000000,3\n");
}
