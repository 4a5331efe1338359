#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "rnnkit/data_tasks.hpp"

using namespace rnnkit;

TEST_SUITE_BEGIN("data_tasks");

namespace {

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
}

bool same_bits(double a, double b) {
  return std::memcmp(&a, &b, sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("one-hot encoding") {
  const Vector v = one_hot<double>(2, 4);
  CHECK(v.size() == 4);
  CHECK(v[2] == 1.0);
  CHECK(v.sum() == 1.0);
  CHECK_THROWS_AS(one_hot<double>(4, 4), ShapeError);
  CHECK_THROWS_AS(one_hot<double>(-1, 4), ShapeError);
}

TEST_CASE("argmax is strict and keeps the lowest tie") {
  Vector v(4);
  v << 0.1, 0.7, 0.7, 0.2;
  CHECK(argmax(v) == 1);
  Vector single(1);
  single << -5.0;
  CHECK(argmax(single) == 0);
  CHECK_THROWS_AS(argmax(Vector()), ShapeError);
}

TEST_CASE("copy samples carry the data symbol across the lag") {
  Rng rng(90);
  const Index K = 6, lag = 4;
  bool seen[6] = {false, false, false, false, false, false};
  for (int rep = 0; rep < 400; ++rep) {
    auto s = make_copy_sample<double>(K, lag, rng);
    REQUIRE(s.inputs.size() == lag + 1);
    REQUIRE(s.targets.size() == 1);

    const Index data = argmax(s.inputs[0]);
    CHECK(data < K - 1);  // the filler id is reserved
    CHECK(argmax(s.targets[0]) == data);
    CHECK(s.targets[0][data] == 1.0);
    for (std::size_t t = 1; t < s.inputs.size(); ++t) {
      CHECK(argmax(s.inputs[t]) == K - 1);
      CHECK(s.inputs[t].sum() == 1.0);
    }
    seen[data] = true;
  }
  for (Index k = 0; k + 1 < K; ++k) CHECK(seen[k]);

  CHECK_THROWS_AS(make_copy_sample<double>(1, 3, rng), ConfigError);
  CHECK_THROWS_AS(make_copy_sample<double>(4, 0, rng), ConfigError);
}

TEST_CASE("vocab maps bytes to dense sorted ids") {
  const Vocab v = Vocab::from_text("banana!");
  REQUIRE(v.size() == 4);  // ! a b n
  CHECK(v.id_to_byte[0] == '!');
  CHECK(v.id_to_byte[1] == 'a');
  CHECK(v.id_to_byte[2] == 'b');
  CHECK(v.id_to_byte[3] == 'n');
  CHECK(v.id_of('a') == 1);
  CHECK(v.id_of('z') == -1);

  const Vocab rebuilt = Vocab::from_bytes(v.id_to_byte);
  for (int b = 0; b < 256; ++b) {
    CHECK(rebuilt.byte_to_id[b] == v.byte_to_id[b]);
  }
}

TEST_CASE("text corpus loading and windowing") {
  write_file("tmp_corpus.txt", "abcabd");
  const TextDataset ds = load_text_corpus("tmp_corpus.txt");
  CHECK(ds.vocab.size() == 4);
  CHECK(ds.ids == std::vector<int>{0, 1, 2, 0, 1, 3});

  auto s = text_window<double>(ds, 1, 3);
  REQUIRE(s.inputs.size() == 3);
  REQUIRE(s.targets.size() == 3);
  CHECK(argmax(s.inputs[0]) == 1);   // 'b'
  CHECK(argmax(s.targets[0]) == 2);  // 'c'
  CHECK(argmax(s.inputs[2]) == 0);   // 'a'
  CHECK(argmax(s.targets[2]) == 1);  // 'b'

  // the last byte can only ever be a target
  CHECK_THROWS_AS(text_window<double>(ds, 3, 3), ShapeError);
  CHECK_THROWS_AS(text_window<double>(ds, -1, 2), ShapeError);
  CHECK_THROWS_AS(text_window<double>(ds, 0, 0), ShapeError);

  CHECK_THROWS_AS(load_text_corpus("no_such_file.txt"), IoError);
  write_file("tmp_tiny.txt", "x");
  CHECK_THROWS_AS(load_text_corpus("tmp_tiny.txt"), IoError);
}

TEST_CASE("checkpoints round-trip bit for bit") {
  Checkpoint ck;
  ck.arch = "lstm";
  ck.scalar = "f64";
  ck.step = 12345;
  ck.rng_seed = 42;
  ck.rng_counter = 991;
  ck.config_json = R"({"hidden":32,"task":"copy"})";
  ck.vocab = {10, 97, 98};

  TensorRecord t1;
  t1.name = "cell.wx";
  t1.rows = 2;
  t1.cols = 3;
  t1.data = {0.1, -0.0, 1e-300, 3.141592653589793, -2.5, 1e308};
  TensorRecord t2;
  t2.name = "opt.t";
  t2.rows = 1;
  t2.cols = 1;
  t2.data = {77.0};
  ck.tensors = {t1, t2};

  save_checkpoint("tmp_ck.bin", ck);
  const Checkpoint back = load_checkpoint("tmp_ck.bin");

  CHECK(back.arch == "lstm");
  CHECK(back.scalar == "f64");
  CHECK(back.step == 12345);
  CHECK(back.rng_seed == 42);
  CHECK(back.rng_counter == 991);
  CHECK(back.config_json == ck.config_json);
  CHECK(back.vocab == ck.vocab);
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors[0].name == "cell.wx");
  CHECK(back.tensors[0].rows == 2);
  CHECK(back.tensors[0].cols == 3);
  for (std::size_t i = 0; i < t1.data.size(); ++i) {
    CHECK(same_bits(back.tensors[0].data[i], t1.data[i]));
  }
  CHECK(back.find("opt.t") != nullptr);
  CHECK(back.find("missing") == nullptr);
}

TEST_CASE("malformed checkpoints are rejected") {
  write_file("tmp_bad1.bin", "some other format\n");
  CHECK_THROWS_AS(load_checkpoint("tmp_bad1.bin"), IoError);

  write_file("tmp_bad2.bin",
             "rnnkit-checkpoint v1\narch rnn\nscalar f64\nstep 0\nrng 1 2\nconfig {}\n"
             "tensors 1\na 2 2\npayload\nxx");
  CHECK_THROWS_AS(load_checkpoint("tmp_bad2.bin"), IoError);  // payload truncated

  write_file("tmp_bad3.bin",
             "rnnkit-checkpoint v1\narch rnn\nscalar f64\nstep 0\nrng 1 2\nconfig {}\n"
             "tensors 0\npayload\nleftover");
  CHECK_THROWS_AS(load_checkpoint("tmp_bad3.bin"), IoError);  // trailing bytes

  write_file("tmp_bad4.bin",
             "rnnkit-checkpoint v1\nbogus line here\ntensors 0\npayload\n");
  CHECK_THROWS_AS(load_checkpoint("tmp_bad4.bin"), IoError);  // unknown header key

  write_file("tmp_bad5.bin", "rnnkit-checkpoint v1\narch rnn\n");
  CHECK_THROWS_AS(load_checkpoint("tmp_bad5.bin"), IoError);  // ends mid-header

  CHECK_THROWS_AS(load_checkpoint("tmp_absent.bin"), IoError);
}

TEST_CASE("parameter tensors survive a checkpoint round-trip exactly") {
  Rng rng(91);
  CellOptions opts;
  opts.layer_norm = true;
  opts.trainable_init_state = true;
  LstmParams<double> p(3, 4, 2, opts);
  InitConfig icfg;
  init_params(p, icfg, rng);

  Checkpoint ck;
  ck.arch = "lstm";
  ck.scalar = "f64";
  ck.config_json = "{}";
  record_views(ck, static_cast<const LstmParams<double>&>(p).views(), "layer0.");
  save_checkpoint("tmp_params.bin", ck);

  const Checkpoint back = load_checkpoint("tmp_params.bin");
  LstmParams<double> q(3, 4, 2, opts);
  restore_views(back, q.views(), "layer0.");
  CHECK(max_abs_diff(p, q) == 0.0);

  // wrong shape on restore
  LstmParams<double> wrong(3, 5, 2, opts);
  CHECK_THROWS_AS(restore_views(back, wrong.views(), "layer0."), IoError);
  // missing prefix
  CHECK_THROWS_AS(restore_views(back, q.views(), "layer9."), IoError);
}

TEST_CASE("optimizer state survives a checkpoint round-trip") {
  Rng rng(92);
  GruParams<double> p(2, 3, 2);
  InitConfig icfg;
  init_params(p, icfg, rng);

  OptimizerConfig ocfg;
  ocfg.kind = OptimizerKind::kAdam;
  OptimizerState st;
  for (int i = 0; i < 3; ++i) {
    GruParams<double> g = zero_like(p);
    for (auto& v : g.views()) {
      for (Index j = 0; j < v.size(); ++j) v.data[j] = rng.uniform(-1.0, 1.0);
    }
    optimizer_step(p, g, st, ocfg);
  }
  REQUIRE(st.t == 3);

  Checkpoint ck;
  ck.arch = "gru";
  ck.scalar = "f64";
  ck.config_json = "{}";
  const auto views = static_cast<const GruParams<double>&>(p).views();
  record_views(ck, views);
  record_optimizer(ck, st, views);
  save_checkpoint("tmp_opt.bin", ck);

  const Checkpoint back = load_checkpoint("tmp_opt.bin");
  OptimizerState st2;
  restore_optimizer(back, st2, views);
  CHECK(st2.t == 3);
  REQUIRE(st2.m.size() == st.m.size());
  REQUIRE(st2.v.size() == st.v.size());
  for (std::size_t i = 0; i < st.m.size(); ++i) {
    CHECK((st2.m[i] - st.m[i]).cwiseAbs().maxCoeff() == 0.0);
    CHECK((st2.v[i] - st.v[i]).cwiseAbs().maxCoeff() == 0.0);
  }

  // a checkpoint without optimizer records leaves the state empty
  Checkpoint bare;
  bare.arch = "gru";
  bare.scalar = "f64";
  bare.config_json = "{}";
  record_views(bare, views);
  save_checkpoint("tmp_noopt.bin", bare);
  OptimizerState st3;
  restore_optimizer(load_checkpoint("tmp_noopt.bin"), st3, views);
  CHECK(st3.m.empty());
  CHECK(st3.v.empty());
  CHECK(st3.t == 0);
}

TEST_SUITE_END();
