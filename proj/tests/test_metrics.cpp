#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "par2rag/metrics.hpp"
#include "test_util.hpp"

using namespace par2rag;

namespace {

// Independent references, written as direct transliterations of the metric
// definitions. They recompute everything from scratch.
int ref_recall(const std::vector<std::string>& retrieved, const std::set<std::string>& gold) {
    for (const std::string& g : gold) {
        for (const std::string& r : retrieved) {
            if (r == g) return 1;
        }
    }
    return 0;
}

int ref_all_pass(const std::vector<std::string>& retrieved, const std::set<std::string>& gold) {
    for (const std::string& g : gold) {
        bool found = false;
        for (const std::string& r : retrieved) found = found || r == g;
        if (!found) return 0;
    }
    return 1;
}

double ref_ndcg(const std::vector<std::string>& retrieved, const std::set<std::string>& gold,
                size_t k) {
    if (retrieved.empty()) return 0.0;
    double dcg = 0.0;
    for (size_t i = 1; i <= std::min(k, retrieved.size()); ++i) {
        double rel = gold.count(retrieved[i - 1]) > 0 ? 1.0 : 0.0;
        dcg += (std::pow(2.0, rel) - 1.0) / (std::log(i + 1.0) / std::log(2.0));
    }
    double idcg = 0.0;
    for (size_t i = 1; i <= std::min(k, gold.size()); ++i)
        idcg += 1.0 / (std::log(i + 1.0) / std::log(2.0));
    return dcg / idcg;
}

RetrievalJudgment make_judgment(std::vector<std::string> retrieved,
                                std::set<std::string> gold) {
    RetrievalJudgment j;
    j.qid = "q";
    j.retrieved_doc_ids_ordered = std::move(retrieved);
    j.gold_doc_ids = std::move(gold);
    j.n_required = static_cast<int>(j.gold_doc_ids.size());
    return j;
}

}  // namespace

TEST_CASE("recall and all-pass indicators", "[metrics]") {
    CHECK(recall_any_hit(make_judgment({"a", "b", "c"}, {"a", "b"})) == 1);
    CHECK(recall_any_hit(make_judgment({"x", "y"}, {"a"})) == 0);
    CHECK(recall_any_hit(make_judgment({"x", "b", "y"}, {"a", "b", "c"})) == 1);

    CHECK(all_pass(make_judgment({"a", "b", "c"}, {"a", "b"})) == 1);
    CHECK(all_pass(make_judgment({"a", "c"}, {"a", "b"})) == 0);
    CHECK(all_pass(make_judgment({"a", "b"}, {"a", "b"})) == 1);

    CHECK_THROWS_AS(recall_any_hit(make_judgment({"a"}, {})), DataError);
    CHECK_THROWS_AS(all_pass(make_judgment({"a"}, {})), DataError);
}

TEST_CASE("ndcg formula", "[metrics][ndcg]") {
    SECTION("all gold at the top is ideal") {
        CHECK(ndcg_at_k(make_judgment({"a", "b", "x"}, {"a", "b"})) == 1.0);
    }
    SECTION("no gold retrieved scores zero") {
        CHECK(ndcg_at_k(make_judgment({"x", "y"}, {"a"})) == 0.0);
    }
    SECTION("empty retrieval scores zero, not undefined") {
        CHECK(ndcg_at_k(make_judgment({}, {"a"})) == 0.0);
    }
    SECTION("worked example: [gold, non-gold, gold] with two gold") {
        double v = ndcg_at_k(make_judgment({"g1", "x", "g2"}, {"g1", "g2"}));
        // DCG = 1/log2(2) + 1/log2(4) = 1.5; IDCG = 1 + 1/log2(3)
        CHECK_THAT(v, Catch::Matchers::WithinAbs(0.91972, 1e-4));
        double idcg = 1.0 + 1.0 / std::log2(3.0);
        CHECK_THAT(v, Catch::Matchers::WithinAbs(1.5 / idcg, 1e-12));
    }
    SECTION("explicit k cutoff") {
        auto j = make_judgment({"x", "g1"}, {"g1"});
        CHECK(ndcg_at_k(j, 1) == 0.0);
        CHECK(ndcg_at_k(j, 2) > 0.0);
    }
    SECTION("empty gold set is an error") {
        CHECK_THROWS_AS(ndcg_at_k(make_judgment({"a"}, {})), DataError);
    }
}

TEST_CASE("metric oracle equivalence on seeded random judgments",
          "[metrics][oracle][property]") {
    std::mt19937_64 rng(424242);
    std::vector<std::string> pool;
    for (int i = 0; i < 20; ++i) pool.push_back("D" + std::to_string(i));

    for (int iter = 0; iter < 1000; ++iter) {
        std::vector<std::string> shuffled = pool;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        size_t n_retrieved = rng() % 13;  // up to 12
        std::vector<std::string> retrieved(shuffled.begin(), shuffled.begin() + n_retrieved);

        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        size_t n_gold = 1 + rng() % 4;  // 1..4
        std::set<std::string> gold(shuffled.begin(), shuffled.begin() + n_gold);

        RetrievalJudgment j = make_judgment(retrieved, gold);
        REQUIRE(recall_any_hit(j) == ref_recall(retrieved, gold));
        REQUIRE(all_pass(j) == ref_all_pass(retrieved, gold));
        size_t k = retrieved.empty() ? 1 : 1 + rng() % retrieved.size();
        REQUIRE_THAT(ndcg_at_k(j, k),
                     Catch::Matchers::WithinAbs(
                         retrieved.empty() ? 0.0 : ref_ndcg(retrieved, gold, k), 1e-9));
        REQUIRE_THAT(ndcg_at_k(j),
                     Catch::Matchers::WithinAbs(
                         retrieved.empty() ? 0.0 : ref_ndcg(retrieved, gold, retrieved.size()),
                         1e-9));

        // binary relevance: the 2^rel - 1 gain equals rel itself
        size_t cut = std::min(k, retrieved.size());
        double dcg_pow = 0, dcg_rel = 0;
        for (size_t i = 1; i <= cut; ++i) {
            double rel = gold.count(retrieved[i - 1]) > 0 ? 1.0 : 0.0;
            dcg_pow += (std::pow(2.0, rel) - 1.0) / std::log2(i + 1.0);
            dcg_rel += rel / std::log2(i + 1.0);
        }
        REQUIRE_THAT(dcg_pow, Catch::Matchers::WithinAbs(dcg_rel, 1e-12));

        // all_pass implies recall
        if (all_pass(j) == 1) REQUIRE(recall_any_hit(j) == 1);

        // ndcg is 1 exactly when the first min(k,|gold|) ranks are all gold
        bool prefix_gold = retrieved.size() >= std::min(k, gold.size());
        for (size_t i = 0; i < std::min(k, gold.size()) && prefix_gold; ++i)
            prefix_gold = gold.count(retrieved[i]) > 0;
        if (!retrieved.empty()) {
            REQUIRE((std::abs(ndcg_at_k(j, k) - 1.0) < 1e-12) == prefix_gold);
        }
    }
}

TEST_CASE("judgment_from_trace maps chunks to parent docs", "[metrics][trace]") {
    testutil::TempDir tmp("judgment");
    testutil::write_lines(tmp / "corpus.jsonl", {
        R"({"doc_id":"d1","title":"D1","text":"first doc body that is long enough to split into two chunks for this test case right here"})",
        R"({"doc_id":"d2","title":"D2","text":"second doc"})",
    });
    CorpusStore store;
    ChunkingConfig cfg;
    cfg.max_chars = 60;
    cfg.overlap_chars = 0;
    cfg.split_on_boundaries = false;
    store.ingest(tmp / "corpus.jsonl", cfg);
    REQUIRE(store.find_chunk("d1#1") != nullptr);

    QaRecord qa;
    qa.qid = "q1";
    qa.question = "?";
    qa.answer = "a";
    qa.gold_doc_ids = {"d1", "d2"};
    qa.n_required = 2;

    RunTrace trace;
    trace.qid = "q1";
    trace.anchor_entries = {"d1#0", "d1#1"};
    HopRecord hop;
    hop.hop_index = 1;
    hop.retrieved = RankedList{"q", {{"d2#0", 1.0}, {"d1#0", 0.5}}};
    trace.hops.push_back(hop);

    RetrievalJudgment j = judgment_from_trace(trace, qa, store);
    CHECK(j.retrieved_doc_ids_ordered == std::vector<std::string>{"d1", "d2"});
    CHECK(j.n_required == 2);
    CHECK(all_pass(j) == 1);

    SECTION("unresolvable chunk id is an error") {
        trace.anchor_entries.push_back("ghost#0");
        CHECK_THROWS_AS(judgment_from_trace(trace, qa, store), DataError);
    }

    SECTION("hop-only retrieval keeps rank order") {
        trace.anchor_entries.clear();
        RetrievalJudgment hop_only = judgment_from_trace(trace, qa, store);
        CHECK(hop_only.retrieved_doc_ids_ordered == std::vector<std::string>{"d2", "d1"});
    }
}

TEST_CASE("correctness judges", "[metrics][judge]") {
    SECTION("exact match judge agrees with string equality") {
        ExactMatchJudge judge;
        CHECK(judge.judge("q", "Paris", "Paris").correct == 1);
        CHECK(judge.judge("q", " Paris ", "Paris").correct == 1);
        CHECK(judge.judge("q", "paris", "Paris").correct == 0);
    }

    PromptLibrary lib = PromptLibrary::load(testutil::prompts_dir());

    SECTION("template judge scores the Decision line") {
        ScriptedBackend backend;
        backend.push(RoleTag::judge, "Explanation: match.\nDecision: yes");
        backend.push(RoleTag::judge, "Explanation: wrong.\nDecision: No");
        TemplateJudge judge(backend, lib, "scripted");
        CHECK(judge.judge("q", "p", "g").correct == 1);
        CHECK(judge.judge("q", "p", "g").correct == 0);
    }

    SECTION("missing Decision line retries once then flags") {
        ScriptedBackend backend;
        backend.push(RoleTag::judge, "no decision at all");
        backend.push(RoleTag::judge, "still nothing");
        TemplateJudge judge(backend, lib, "scripted");
        JudgeVerdict v = judge.judge("q", "p", "g");
        CHECK(v.correct == 0);
        CHECK(v.unparsed);
        CHECK_THROWS_AS(judge.judge("q", "p", "g"), BackendError);  // both queued used up
    }

    SECTION("judge prompt carries the three inputs") {
        RenderedPrompt p = render_judge_prompt(lib, "Q?", "pred", "gold");
        CHECK(p.user.find("Question: Q?") != std::string::npos);
        CHECK(p.user.find("Predicted Answer: pred") != std::string::npos);
        CHECK(p.user.find("Ground-Truth Answer: gold") != std::string::npos);
        CHECK(p.system.find("Decision: <yes|no>") != std::string::npos);
    }
}

TEST_CASE("aggregation", "[metrics][aggregate]") {
    SECTION("single all-ones query") {
        PerQueryMetrics row{"q1", 1, 1, 1.0, 1, 2, false};
        MetricReport report = aggregate({row});
        CHECK(report.aggregates.correct == 1.0);
        CHECK(report.aggregates.all_pass == 1.0);
        CHECK(report.n_queries == 1);
        CHECK(report.by_required_length.at(2).count == 1);
    }

    SECTION("two queries average") {
        PerQueryMetrics a{"q1", 1, 1, 1.0, 1, 2, false};
        PerQueryMetrics b{"q2", 0, 0, 0.0, 0, 3, false};
        MetricReport report = aggregate({a, b});
        CHECK(report.aggregates.recall == 0.5);
        CHECK(report.by_required_length.at(2).recall == 1.0);
        CHECK(report.by_required_length.at(3).recall == 0.0);
    }

    SECTION("grouped means recombine to the global mean") {
        std::mt19937_64 rng(99);
        std::vector<PerQueryMetrics> rows;
        for (int i = 0; i < 500; ++i) {
            PerQueryMetrics r;
            r.qid = "q" + std::to_string(i);
            r.correct = static_cast<int>(rng() % 2);
            r.recall = static_cast<int>(rng() % 2);
            r.all_pass = r.recall == 1 ? static_cast<int>(rng() % 2) : 0;
            r.ndcg = static_cast<double>(rng() % 1000) / 1000.0;
            r.n_required = 2 + static_cast<int>(rng() % 3);
            rows.push_back(r);
        }
        MetricReport report = aggregate(rows);
        CHECK(report.aggregates.all_pass <= report.aggregates.recall);
        double weighted = 0;
        size_t total = 0;
        for (const auto& [n, agg] : report.by_required_length) {
            weighted += agg.ndcg * static_cast<double>(agg.count);
            total += agg.count;
        }
        CHECK(total == report.n_queries);
        CHECK_THAT(weighted / static_cast<double>(total),
                   Catch::Matchers::WithinAbs(report.aggregates.ndcg, 1e-12));
    }
}

TEST_CASE("evaluate_traces demands aligned qid sets", "[metrics][eval]") {
    testutil::TempDir tmp("eval");
    testutil::write_lines(tmp / "corpus.jsonl",
                          {R"({"doc_id":"d1","title":"T","text":"body"})"});
    CorpusStore store;
    store.ingest(tmp / "corpus.jsonl", ChunkingConfig{});

    QaRecord qa;
    qa.qid = "q1";
    qa.question = "?";
    qa.answer = "a";
    qa.gold_doc_ids = {"d1"};
    qa.n_required = 1;

    ExactMatchJudge judge;
    CHECK_THROWS_WITH(evaluate_traces({}, {qa}, store, judge),
                      Catch::Matchers::ContainsSubstring("q1"));

    RunTrace trace;
    trace.qid = "q1";
    trace.final_answer = "a";
    trace.anchor_entries = {"d1#0"};
    MetricReport report = evaluate_traces({trace}, {qa}, store, judge);
    CHECK(report.aggregates.correct == 1.0);
    CHECK(report.aggregates.recall == 1.0);

    SECTION("report files round-trip") {
        write_report_files(report, tmp / "pq.jsonl", tmp / "report.json");
        json r = json::parse(read_file(tmp / "report.json"));
        CHECK(r.at("report_version") == kReportVersion);
        CHECK(r.at("n_queries") == 1);
        CHECK(r.at("aggregates").at("ndcg") == 1.0);
    }
}
