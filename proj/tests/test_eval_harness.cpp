// SPDX-License-Identifier: Apache-2.0
#include "soundfield/eval_harness.hpp"
#include "soundfield/modal_sim.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

using namespace sfr;

namespace {

const DatasetManifest& small_dataset() {
  static const DatasetManifest manifest = generate_dataset(4, 31, test::scratch_dir("eval_dataset"));
  return manifest;
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

std::vector<double> split_numbers(const std::string& line) {
  std::vector<double> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(std::stod(cell));
  return out;
}

// Throws for one microphone count to exercise the skip path.
class FlakyReconstructor : public Reconstructor {
 public:
  [[nodiscard]] std::string name() const override { return "flaky"; }
  [[nodiscard]] std::vector<FieldTensor> reconstruct(std::span<const Trial> trials) const override {
    if (trials.front().n_mic == 15) throw std::runtime_error("no");
    return BaselineReconstructor(BaselineMethod::kNearest).reconstruct(trials);
  }
};

}  // namespace

TEST_CASE("normal quantile") {
  CHECK(normal_quantile(0.95) == doctest::Approx(1.959963985).epsilon(1e-9));
  CHECK(normal_quantile(0.99) == doctest::Approx(2.575829304).epsilon(1e-9));
  CHECK_THROWS_AS(normal_quantile(1.0), std::invalid_argument);
}

TEST_CASE("oracle predictor reconstructs the truth") {
  const auto& ds = small_dataset();
  EvalConfig cfg;
  cfg.arrangements_per_room = 4;
  const NetworkReconstructor oracle(oracle_predictor(), "oracle");
  const std::vector<int> rooms{0, 1, 2, 3};
  const EvalResult r = evaluate(oracle, ds, rooms, cfg);
  REQUIRE(r.records.size() == 4u * 4u * 4u);
  CHECK(r.skipped == 0);
  CHECK(r.aggregate.size() == 160u);
  for (const auto& rec : r.records) {
    for (int k = 0; k < 40; ++k) {
      CHECK(rec.nmse_db[static_cast<size_t>(k)] <= -100.0);
      CHECK(rec.mssim[static_cast<size_t>(k)] == doctest::Approx(1.0).epsilon(1e-4));
    }
  }
  for (size_t i = 0; i < r.aggregate.size(); ++i) {
    const auto& row = r.aggregate[i];
    CHECK(row.n_mic == cfg.n_mics[i / 40]);
    CHECK(row.frequency_hz == ds.freqs.hz[i % 40]);
    CHECK(row.count == 16);
    CHECK(row.nmse_ci_lo <= row.mean_nmse_db);
    CHECK(row.mean_nmse_db <= row.nmse_ci_hi);
  }
}

TEST_CASE("a single microphone gives a constant field for both baselines") {
  auto rng = test::rng_for(61);
  const FieldTensor truth = magnitude_field(test::random_room(rng));
  const Observations o = observe(truth, MicArrangement{{{3, 6}}});
  for (auto method : {BaselineMethod::kNearest, BaselineMethod::kInverseDistance}) {
    const FieldTensor f = baseline_reconstruct(method, o, truth.room);
    for (int k = 0; k < 40; ++k) CHECK((f.values.row(k).array() == static_cast<float>(o.values(k, 0))).all());
  }
}

TEST_CASE("baselines are exact at observed points and idw weights sum to one") {
  auto rng = test::rng_for(62);
  const FieldTensor truth = magnitude_field(test::random_room(rng));
  for (int trial = 0; trial < 10; ++trial) {
    Rng arng = derive_rng(5, static_cast<std::uint64_t>(trial));
    const MicArrangement arr = sample_arrangement(arng, test::uniform_int(rng, 2, 50));
    const Observations o = observe(truth, arr);
    const FieldTensor nearest = baseline_reconstruct(BaselineMethod::kNearest, o, truth.room);
    const FieldTensor idw = baseline_reconstruct(BaselineMethod::kInverseDistance, o, truth.room);
    for (const auto& p : arr.points) {
      CHECK(nearest.values.col(p.fine_flat()) == truth.values.col(p.fine_flat()));
      CHECK(idw.values.col(p.fine_flat()) == truth.values.col(p.fine_flat()));
    }
    for (int s = 0; s < 20; ++s) {
      const int fi = test::uniform_int(rng, 0, 31), fj = test::uniform_int(rng, 0, 31);
      const Vector<double> w = idw_weights(arr, fi, fj);
      CHECK(w.sum() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(w.minCoeff() >= 0.0);
      // Closer microphones never get less weight.
      for (int a = 0; a < arr.size(); ++a)
        for (int b = 0; b < arr.size(); ++b) {
          const auto& pa = arr.points[static_cast<size_t>(a)];
          const auto& pb = arr.points[static_cast<size_t>(b)];
          const double da = std::hypot(4 * pa.i - fi, 4 * pa.j - fj), db = std::hypot(4 * pb.i - fi, 4 * pb.j - fj);
          if (da < db) CHECK(w(a) >= w(b));
        }
    }
  }
}

TEST_CASE("nearest neighbour ties go to the smallest coarse index") {
  FieldTensor truth;
  truth.values.col(CoarsePoint{2, 0}.fine_flat()).setConstant(5.0f);
  truth.values.col(CoarsePoint{0, 0}.fine_flat()).setConstant(3.0f);
  // Listed out of order on purpose: the tie break is on the grid, not the list.
  const Observations o = observe(truth, MicArrangement{{{2, 0}, {0, 0}}});
  const FieldTensor f = baseline_reconstruct(BaselineMethod::kNearest, o, truth.room);
  CHECK(f.at(0, 0, 4) == 3.0f);   // equidistant from fine x = 0 and x = 8
  CHECK(f.at(0, 0, 5) == 5.0f);
  CHECK(f.at(0, 0, 3) == 3.0f);
}

TEST_CASE("baseline method names") {
  CHECK(parse_baseline_method("nearest") == BaselineMethod::kNearest);
  CHECK(parse_baseline_method("idw") == BaselineMethod::kInverseDistance);
  CHECK(baseline_name(BaselineMethod::kInverseDistance) == "idw");
  CHECK_THROWS_AS(parse_baseline_method("kriging"), std::invalid_argument);
}

TEST_CASE("evaluation does not depend on threads or batch size") {
  const auto& ds = small_dataset();
  const BaselineReconstructor idw(BaselineMethod::kInverseDistance);
  const std::vector<int> rooms{1, 3};
  EvalConfig a;
  a.n_mics = {5, 20};
  a.arrangements_per_room = 7;
  a.seed = 9;
  EvalConfig b = a;
  b.threads = 3;
  b.batch_size = 2;
  const EvalResult ra = evaluate(idw, ds, rooms, a);
  const EvalResult rb = evaluate(idw, ds, rooms, b);
  REQUIRE(ra.records.size() == rb.records.size());
  for (size_t i = 0; i < ra.records.size(); ++i) {
    CHECK(ra.records[i].room_id == rb.records[i].room_id);
    CHECK(ra.records[i].arrangement_id == rb.records[i].arrangement_id);
    CHECK(ra.records[i].nmse == rb.records[i].nmse);
    CHECK(ra.records[i].mssim == rb.records[i].mssim);
  }
  // Records come out ordered by room, then n_mic, then arrangement.
  CHECK(ra.records.front().room_id == 1);
  CHECK(ra.records[7].n_mic == 20);
  CHECK(ra.records[6].arrangement_id == 6);
}

TEST_CASE("failed batches are skipped and counted") {
  const auto& ds = small_dataset();
  EvalConfig cfg;
  cfg.n_mics = {5, 15};
  cfg.arrangements_per_room = 3;
  const std::vector<int> rooms{0};
  const EvalResult r = evaluate(FlakyReconstructor(), ds, rooms, cfg);
  CHECK(r.skipped == 3);
  CHECK(r.records.size() == 3u);
  REQUIRE(r.aggregate.size() == 80u);
  CHECK(r.aggregate[40].count == 0);
  CHECK(std::isnan(r.aggregate[40].mean_nmse_db));
}

TEST_CASE("confidence interval shrinks like one over root n") {
  auto rng = test::rng_for(63);
  std::vector<EvalRecord> records;
  for (int i = 0; i < 4000; ++i) {
    EvalRecord r;
    r.n_mic = 5;
    for (int k = 0; k < 40; ++k) {
      const double v = test::uniform(rng, 0.01, 1.0);
      r.nmse.push_back(v);
      r.nmse_db.push_back(nmse_to_db(v));
      r.mssim.push_back(test::uniform(rng, 0.0, 1.0));
    }
    records.push_back(std::move(r));
  }
  const std::vector<int> mics{5};
  const auto wide = aggregate(std::span(records).first(250), frequency_grid(), mics, 0.95);
  const auto narrow = aggregate(records, frequency_grid(), mics, 0.95);
  for (int k = 0; k < 40; ++k) {
    const double w = wide[static_cast<size_t>(k)].nmse_ci_hi - wide[static_cast<size_t>(k)].nmse_ci_lo;
    const double n = narrow[static_cast<size_t>(k)].nmse_ci_hi - narrow[static_cast<size_t>(k)].nmse_ci_lo;
    CHECK(w / n == doctest::Approx(4.0).epsilon(0.15));
  }
  // Direct check of one cell against the textbook formula.
  double mean = 0, ss = 0;
  for (const auto& r : records) mean += r.mssim[0];
  mean /= 4000;
  for (const auto& r : records) ss += (r.mssim[0] - mean) * (r.mssim[0] - mean);
  const double half = 1.959963985 * std::sqrt(ss / 3999) / std::sqrt(4000.0);
  CHECK(narrow[0].mean_mssim == doctest::Approx(mean).epsilon(1e-12));
  CHECK(narrow[0].mssim_ci_hi - narrow[0].mean_mssim == doctest::Approx(half).epsilon(1e-6));
}

TEST_CASE("band nmse averages linearly before converting") {
  EvalRecord r;
  r.nmse.assign(40, 0.1);
  r.nmse[0] = 1.0;
  r.nmse[1] = std::nan("");
  CHECK(band_nmse_db(r, 0, 3) == doctest::Approx(10 * std::log10(0.55)));
  CHECK(band_nmse_db(r, 2, 40) == doctest::Approx(-10.0));
  CHECK(std::isnan(band_nmse_db(r, 1, 2)));
}

TEST_CASE("arrangement extremes") {
  auto rng = test::rng_for(64);
  const FieldTensor truth = magnitude_field(test::random_room(rng));
  const BaselineReconstructor idw(BaselineMethod::kInverseDistance);
  const ArrangementExtremes e = arrangement_extremes(idw, truth, 0, 8, 20, 3);
  CHECK(e.best.band_nmse_db <= e.worst.band_nmse_db);
  CHECK(e.best.arrangement.size() == 8);
  CHECK(e.best.band_nmse_db == doctest::Approx(band_nmse_db(e.best.record)));
  const FieldTensor again = baseline_reconstruct(BaselineMethod::kInverseDistance, observe(truth, e.worst.arrangement), truth.room);
  CHECK(nmse(truth, again).value == e.worst.record.nmse);
  CHECK_THROWS_AS(arrangement_extremes(idw, truth, 0, 8, 1, 3), std::invalid_argument);
}

TEST_CASE("field csv export round trips") {
  auto rng = test::rng_for(65);
  const FieldTensor f = magnitude_field(test::random_room(rng));
  const auto path = test::scratch_dir("field_csv") / "slice.csv";
  export_field_csv(f, 17, path);
  const auto lines = read_lines(path);
  REQUIRE(lines.size() == 33u);
  CHECK(lines[0].rfind("y\\x,", 0) == 0);
  const auto header = split_numbers(lines[0].substr(4));
  REQUIRE(header.size() == 32u);
  for (int i = 0; i < 32; ++i) CHECK(header[static_cast<size_t>(i)] == doctest::Approx(i * f.room.lx / 31));
  for (int j = 0; j < 32; ++j) {
    const auto row = split_numbers(lines[static_cast<size_t>(j) + 1]);
    REQUIRE(row.size() == 33u);
    CHECK(row[0] == doctest::Approx(j * f.room.ly / 31));
    for (int i = 0; i < 32; ++i) CHECK(static_cast<float>(row[static_cast<size_t>(i) + 1]) == f.at(17, j, i));
  }
  CHECK_THROWS_AS(export_field_csv(f, 40, path), std::out_of_range);
}

TEST_CASE("records and aggregate csv layout") {
  const auto& ds = small_dataset();
  EvalConfig cfg;
  cfg.arrangements_per_room = 2;
  const std::vector<int> rooms{2};
  const EvalResult r = evaluate(BaselineReconstructor(BaselineMethod::kNearest), ds, rooms, cfg);
  const auto dir = test::scratch_dir("eval_csv");
  write_records_csv(dir / "records.csv", ds.freqs, r.records);
  write_aggregate_csv(dir / "aggregate.csv", r.aggregate);
  const auto rec = read_lines(dir / "records.csv");
  CHECK(rec.front() == "room_id,arrangement_id,n_mic,frequency_hz,nmse_db,mssim");
  CHECK(rec.size() == 1u + 4u * 2u * 40u);
  const auto agg = read_lines(dir / "aggregate.csv");
  CHECK(agg.front() == "n_mic,frequency_hz,mean_nmse_db,nmse_ci_lo,nmse_ci_hi,mean_mssim,mssim_ci_lo,mssim_ci_hi");
  CHECK(agg.size() == 161u);
}

TEST_CASE("config validation") {
  EvalConfig c;
  CHECK_NOTHROW(c.validate());
  c.n_mics = {0};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = EvalConfig{};
  c.confidence = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = EvalConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
