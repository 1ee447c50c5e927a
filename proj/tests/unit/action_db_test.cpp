#include <doctest.h>

#include <fstream>
#include <thread>

#include "coloop/action_db.hpp"
#include "coloop/common.hpp"
#include "test_support.hpp"

using namespace coloop;
using coloop::testing::record_with_k;
using coloop::testing::TempDir;

TEST_CASE("stats track best, worst and count") {
  ActionDb db;
  std::size_t i = 0;
  for (double k : {24.0, 26.0, 30.0, 27.0, 25.0, 28.0}) db.append(record_with_k("s", k, i++));
  const auto st = db.stats("s");
  CHECK(st.k_best == doctest::Approx(30.0));
  CHECK(st.k_worst == doctest::Approx(24.0));
  CHECK(st.delta() == doctest::Approx(6.0));
  CHECK(st.count == 6U);
  CHECK(st.prior_attempts() == 0.0);
  for (std::size_t j = 0; j < 6; ++j) db.append(record_with_k("s", 26.0, 100 + j));
  CHECK(db.stats("s").prior_attempts() == doctest::Approx(1.0));
  CHECK_THROWS_AS(db.stats("missing"), NotFoundError);
}

TEST_CASE("append assigns increasing creation order and rejects inconsistent records") {
  ActionDb db;
  const auto a = db.append(record_with_k("s", 20, 1));
  const auto b = db.append(record_with_k("t", 21, 2));
  CHECK(a.appended);
  CHECK(b.created_at > a.created_at);
  auto bad = record_with_k("s", 20, 3);
  bad.k = 33.0;
  CHECK_THROWS_AS(db.append(bad), IntegrityError);
  auto empty = record_with_k("s", 20, 4);
  empty.action.keyframes.clear();
  CHECK_THROWS_AS(db.append(empty), ValidationError);
}

TEST_CASE("the same action from the same source is stored once") {
  ActionDb db;
  CHECK(db.append(record_with_k("s", 20, 1)).appended);
  const auto again = db.append(record_with_k("s", 20, 1));
  CHECK(again.duplicate);
  CHECK_FALSE(again.appended);
  CHECK(db.size() == 1U);
  // A later round is a different source.
  CHECK(db.append(record_with_k("s", 20, 1, 1)).appended);
  CHECK(db.find("s", record_with_k("s", 20, 1).action_hash())->round == 0);
}

TEST_CASE("snapshot and restore reproduce the database") {
  TempDir dir;
  ActionDb db;
  for (std::size_t i = 0; i < 20; ++i) db.append(record_with_k("s" + std::to_string(i % 3), 10.0 + i, i));
  db.snapshot(dir / "snap.jsonl.gz");
  const auto back = ActionDb::restore(dir / "snap.jsonl.gz");
  REQUIRE(back.size() == db.size());
  const auto a = db.records();
  const auto b = back.records();
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].to_json() == b[i].to_json());
  }
  CHECK(back.all_stats().size() == 3U);
}

TEST_CASE("a persistent database survives reopen and checkpoint") {
  TempDir dir;
  {
    auto db = ActionDb::open(dir / "db");
    for (std::size_t i = 0; i < 5; ++i) db.append(record_with_k("s", 20.0 + i, i));
    db.checkpoint();
    db.append(record_with_k("s", 40.0, 99));
  }
  auto db = ActionDb::open(dir / "db");
  CHECK(db.size() == 6U);
  CHECK(db.stats("s").k_best == doctest::Approx(40.0));
  // Creation order continues after the reloaded records.
  const auto next = db.append(record_with_k("t", 20.0, 100));
  CHECK(next.created_at == 7U);
}

TEST_CASE("a truncated final log line fails the load at that line") {
  TempDir dir;
  {
    auto db = ActionDb::open(dir / "db");
    db.append(record_with_k("s", 20.0, 1));
  }
  {
    std::ofstream log(dir / "db" / ActionDb::kLogFile, std::ios::app);
    log << "{\"scenario_id\": \"s\", \"k\":";
  }
  try {
    (void)ActionDb::open(dir / "db");
    FAIL("expected a load error");
  } catch (const LoadError& e) {
    CHECK(e.line() == 2U);
  }
}

TEST_CASE("concurrent readers see consistent stats while a writer appends") {
  ActionDb db;
  std::atomic<bool> done{false};
  std::atomic<int> violations{0};
  std::thread reader([&] {
    while (!done) {
      for (const auto& [id, st] : db.all_stats()) {
        if (st.k_best < st.k_worst || st.count == 0) ++violations;
      }
    }
  });
  for (std::size_t i = 0; i < 500; ++i) db.append(record_with_k("s" + std::to_string(i % 7), 5.0 + i % 40, i));
  done = true;
  reader.join();
  CHECK(violations == 0);
  CHECK(db.size() == 500U);
}
