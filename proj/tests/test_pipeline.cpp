#include <algorithm>
#include <set>

#include <catch2/catch_amalgamated.hpp>

#include "icsd/pipeline.hpp"
#include "test_util.hpp"

using namespace icsd;

namespace {

// Answers by global call order; the fallback covers everything after the
// scripted prefix. Records every prompt it is actually asked.
class ReplyProvider : public llm::ChatProvider {
  public:
    ReplyProvider(std::vector<std::string> by_call, std::string fallback)
        : by_call_(std::move(by_call)), fallback_(std::move(fallback)) {}

    llm::ProviderResponse complete(const std::string& prompt) override {
        prompts.push_back(prompt);
        llm::ProviderResponse r;
        r.status = 200;
        r.content = prompts.size() <= by_call_.size() ? by_call_[prompts.size() - 1] : fallback_;
        return r;
    }

    std::vector<std::string> prompts;

  private:
    std::vector<std::string> by_call_;
    std::string fallback_;
};

const char* kTwelveCaptions =
    "a black dog runs across the wet grass\n"
    "a small child eats a red apple\n"
    "two bikes lean against a brick wall\n"
    "a woman reads a book under a tree\n"
    "the brown horse jumps over a white fence\n"
    "a cat sleeps on the warm window sill\n"
    "people wait for a train on the platform\n"
    "a fisherman holds a large silver fish\n"
    "the chef slices onions in a bright kitchen\n"
    "a yellow kite flies above the beach\n"
    "an old truck parks beside the barn\n"
    "children build a sand castle near the waves\n";

config::RunConfig base_config(const testutil::TempDir& dir) {
    config::RunConfig cfg;
    cfg.output_dir = dir / "out";
    cfg.corpus.path = dir / "corpus.txt";
    cfg.embedder.dim = 64;
    cfg.group_size = 4;
    cfg.bounds = {2, 3};
    cfg.policy.backoff_base_ms = 1;
    cfg.policy.backoff_cap_ms = 2;
    cfg.policy.rate_per_minute = 0;
    cfg.chat.endpoint = "http://unused.invalid/v1/chat/completions";
    cfg.chat.model = "test-model";
    cfg.seed = 7;
    cfg.threads = 1;
    return cfg;
}

std::size_t count_lines(const std::string& s) {
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

}  // namespace

TEST_CASE("icsd run: cover, selection, pairs, jobs, report all reconcile") {
    testutil::TempDir dir("icsd-run");
    testutil::write_file(dir / "corpus.txt", kTwelveCaptions);
    auto cfg = base_config(dir);

    ReplyProvider prov({}, "{\"index\": [1, 2], \"summary\": \"two captions agree\"}");
    auto result = pipeline::run_pipeline(cfg, &prov);

    const auto& counts = result.report.at("counts");
    CHECK(counts.at("corpus_kept") == 12);
    CHECK(counts.at("corpus_records_read") == 12);
    const std::size_t groups_in = counts.at("groups_in").get<std::size_t>();
    CHECK(groups_in >= 3);  // 12 captions, groups of 4
    CHECK(counts.at("selections_accepted") == groups_in);
    CHECK(counts.at("selections_rejected") == 0);
    CHECK(counts.at("pairs") == result.pairs.size());
    CHECK(result.pairs.size() == groups_in);
    CHECK(counts.at("jobs_submitted") == result.pairs.size());

    auto groups = group::load_groups(cfg.output_dir / "groups.jsonl");
    REQUIRE(groups.size() == 12);
    std::set<corpus::CaptionId> covered;
    auto records = store::read_stage(cfg.output_dir, "selections");
    REQUIRE(records.size() == groups_in);
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto qid = records[i].at("query_id").get<std::uint64_t>();
        const auto git = std::find_if(groups.begin(), groups.end(),
                                      [&](const auto& g) { return g.query_id == qid; });
        REQUIRE(git != groups.end());
        covered.insert(git->member_ids.begin(), git->member_ids.end());
        // indices [1,2] -> the query itself and its nearest neighbour
        CHECK(result.pairs[i].caption_ids ==
              std::vector<corpus::CaptionId>{git->member_ids[0], git->member_ids[1]});
        CHECK(result.pairs[i].summary == "two captions agree");
        REQUIRE(result.pairs[i].job.has_value());
        CHECK(result.pairs[i].job->prompt_text == "two captions agree");
        CHECK(result.pairs[i].job->seed == synth::pair_seed(cfg.seed, i));
        // stub backend wrote a placeholder per job
        CHECK(std::filesystem::exists(cfg.output_dir / "images" /
                                      (to_hex(result.pairs[i].job->job_id) + ".json")));
    }
    CHECK(covered.size() == 12);  // greedy cover reached every caption

    const std::string manifest = testutil::read_file(result.manifest_path);
    CHECK(count_lines(manifest) == result.pairs.size());
    CHECK(std::filesystem::exists(result.report_path));
    CHECK(std::filesystem::exists(cfg.output_dir / "audit.jsonl"));
}

TEST_CASE("a rerun with identical config replays stages without the provider") {
    testutil::TempDir dir("rerun");
    testutil::write_file(dir / "corpus.txt", kTwelveCaptions);
    auto cfg = base_config(dir);

    ReplyProvider first({}, "{\"index\": [1, 2], \"summary\": \"two captions agree\"}");
    auto run1 = pipeline::run_pipeline(cfg, &first);
    const std::string manifest1 = testutil::read_file(run1.manifest_path);

    // would corrupt the output if it were ever consulted
    ReplyProvider second({}, "{\"index\": [1, 1], \"summary\": \"bad\"}");
    auto run2 = pipeline::run_pipeline(cfg, &second);
    CHECK(second.prompts.empty());
    CHECK(testutil::read_file(run2.manifest_path) == manifest1);
    CHECK(run2.report.at("counts") == run1.report.at("counts"));
}

TEST_CASE("editing the corpus invalidates downstream stages") {
    testutil::TempDir dir("invalidate");
    testutil::write_file(dir / "corpus.txt", kTwelveCaptions);
    auto cfg = base_config(dir);
    ReplyProvider prov({}, "{\"index\": [1, 2], \"summary\": \"two captions agree\"}");
    pipeline::run_pipeline(cfg, &prov);

    testutil::write_file(dir / "corpus.txt",
                         std::string(kTwelveCaptions) + "a brand new caption appears\n");
    ReplyProvider prov2({}, "{\"index\": [1, 2], \"summary\": \"two captions agree\"}");
    auto rerun = pipeline::run_pipeline(cfg, &prov2);
    CHECK(rerun.report.at("counts").at("corpus_kept") == 13);
    bool archived = false;
    for (const auto& e : std::filesystem::directory_iterator(cfg.output_dir))
        if (e.path().filename().string().find(".stale-") != std::string::npos) archived = true;
    CHECK(archived);
}

TEST_CASE("rejections and parse failures are terminal after the re-ask budget") {
    testutil::TempDir dir("reject");
    testutil::write_file(dir / "corpus.txt", kTwelveCaptions);
    auto cfg = base_config(dir);

    // first visited group: duplicate index on all three asks -> rejected
    // second visited group: unparseable on all three asks -> skipped
    ReplyProvider prov(
        {
            "{\"index\": [1, 1], \"summary\": \"dup\"}",
            "{\"index\": [1, 1], \"summary\": \"dup\"}",
            "{\"index\": [1, 1], \"summary\": \"dup\"}",
            "no json in this reply",
            "still no json",
            "nothing here either",
        },
        "{\"index\": [1, 2], \"summary\": \"two captions agree\"}");
    auto result = pipeline::run_pipeline(cfg, &prov);

    const auto& counts = result.report.at("counts");
    CHECK(counts.at("selections_rejected") == 1);
    CHECK(counts.at("selections_skipped") == 1);
    CHECK(result.report.at("rejections").at("duplicate_index") == 1);
    const std::size_t groups_in = counts.at("groups_in").get<std::size_t>();
    CHECK(counts.at("selections_accepted") == groups_in - 2);
    CHECK(result.pairs.size() == groups_in - 2);

    auto records = store::read_stage(cfg.output_dir, "selections");
    CHECK(records[0].at("status") == "rejected");
    CHECK(records[0].at("reason") == "duplicate_index");
    CHECK(records[0].at("asks") == 3);  // 1 + reask budget of 2
    CHECK(records[1].at("status") == "skipped");
    CHECK(records[1].at("asks") == 3);
}

TEST_CASE("sel_wo_sum uses the query caption, not the summary, as the prompt") {
    testutil::TempDir dir("selwosum");
    testutil::write_file(dir / "corpus.txt", kTwelveCaptions);
    auto cfg = base_config(dir);
    cfg.mode = synth::PipelineMode::sel_wo_sum;

    ReplyProvider prov({}, "{\"index\": [1, 2], \"summary\": \"a summary to ignore\"}");
    auto result = pipeline::run_pipeline(cfg, &prov);
    REQUIRE_FALSE(result.pairs.empty());

    corpus::CorpusHandle c = corpus::load_canonical(cfg.output_dir / "corpus.jsonl");
    auto records = store::read_stage(cfg.output_dir, "selections");
    for (std::size_t i = 0; i < result.pairs.size(); ++i) {
        const auto qid = records[i].at("query_id").get<corpus::CaptionId>();
        CHECK(result.pairs[i].summary == c.at(qid).text);
        CHECK(result.pairs[i].job->prompt_text == c.at(qid).text);
        CHECK(result.pairs[i].caption_ids.size() == 2);
    }
}

TEST_CASE("sum_wo_sel merges the first sum_neighbors+1 members verbatim") {
    testutil::TempDir dir("sumwosel");
    testutil::write_file(dir / "corpus.txt", kTwelveCaptions);
    auto cfg = base_config(dir);
    cfg.mode = synth::PipelineMode::sum_wo_sel;
    cfg.sum_neighbors = 2;  // take = 3 of the 4 group members

    ReplyProvider prov({}, "{\"summary\": \"a condensed scene\"}");
    auto result = pipeline::run_pipeline(cfg, &prov);
    REQUIRE_FALSE(result.pairs.empty());

    auto groups = group::load_groups(cfg.output_dir / "groups.jsonl");
    auto records = store::read_stage(cfg.output_dir, "selections");
    for (std::size_t i = 0; i < result.pairs.size(); ++i) {
        const auto qid = records[i].at("query_id").get<std::uint64_t>();
        const auto git = std::find_if(groups.begin(), groups.end(),
                                      [&](const auto& g) { return g.query_id == qid; });
        REQUIRE(git != groups.end());
        CHECK(result.pairs[i].caption_ids ==
              std::vector<corpus::CaptionId>(git->member_ids.begin(),
                                             git->member_ids.begin() + 3));
        CHECK(result.pairs[i].summary == "a condensed scene");
    }
}

TEST_CASE("gtg groups captions by image id with the lowest id as query") {
    testutil::TempDir dir("gtg");
    testutil::write_file(dir / "corpus.jsonl",
        "{\"text\":\"b zero\",\"image_id\":\"imgB\"}\n"
        "{\"text\":\"a zero\",\"image_id\":\"imgA\"}\n"
        "{\"text\":\"b one\",\"image_id\":\"imgB\"}\n"
        "{\"text\":\"c zero\",\"image_id\":\"imgC\"}\n"
        "{\"text\":\"a one\",\"image_id\":\"imgA\"}\n"
        "{\"text\":\"c one\",\"image_id\":\"imgC\"}\n"
        "{\"text\":\"a two\",\"image_id\":\"imgA\"}\n"
        "{\"text\":\"b two\",\"image_id\":\"imgB\"}\n"
        "{\"text\":\"c two\",\"image_id\":\"imgC\"}\n");
    auto cfg = base_config(dir);
    cfg.corpus.path = dir / "corpus.jsonl";
    cfg.corpus.format = corpus::CorpusFormat::jsonl;
    cfg.mode = synth::PipelineMode::gtg;

    ReplyProvider prov({}, "{\"summary\": \"an image scene\"}");
    auto result = pipeline::run_pipeline(cfg, &prov);

    CHECK(result.report.at("counts").at("groups_in") == 3);
    REQUIRE(result.pairs.size() == 3);
    // groups sorted by query id: imgB {0,2,7}, imgA {1,4,6}, imgC {3,5,8}
    CHECK(result.pairs[0].caption_ids == std::vector<corpus::CaptionId>{0, 2, 7});
    CHECK(result.pairs[1].caption_ids == std::vector<corpus::CaptionId>{1, 4, 6});
    CHECK(result.pairs[2].caption_ids == std::vector<corpus::CaptionId>{3, 5, 8});
    for (const auto& p : result.pairs) CHECK(p.summary == "an image scene");

    // plain corpora carry no image ids, so gtg cannot run on them
    testutil::TempDir dir2("gtg-bad");
    testutil::write_file(dir2 / "corpus.txt", "one line\nanother line\nthird line\n");
    auto bad = base_config(dir2);
    bad.mode = synth::PipelineMode::gtg;
    ReplyProvider prov2({}, "{\"summary\": \"x\"}");
    CHECK_THROWS_AS(pipeline::run_pipeline(bad, &prov2), DataError);
}

TEST_CASE("uni_context emits one pair per caption without any llm traffic") {
    testutil::TempDir dir("uni");
    testutil::write_file(dir / "corpus.txt", kTwelveCaptions);
    auto cfg = base_config(dir);
    cfg.mode = synth::PipelineMode::uni_context;
    cfg.chat.endpoint.clear();  // no llm needed at all

    auto result = pipeline::run_pipeline(cfg);
    REQUIRE(result.pairs.size() == 12);
    corpus::CorpusHandle c = corpus::load_canonical(cfg.output_dir / "corpus.jsonl");
    for (std::size_t i = 0; i < result.pairs.size(); ++i) {
        CHECK(result.pairs[i].caption_ids == std::vector<corpus::CaptionId>{i});
        CHECK(result.pairs[i].summary == c.at(i).text);
        CHECK(result.pairs[i].job->prompt_text == c.at(i).text);
        CHECK(result.pairs[i].job->seed == synth::pair_seed(cfg.seed, i));
    }
    CHECK(result.report.at("counts").at("jobs_submitted") == 12);
}

TEST_CASE("generative baseline condenses captions and skips empty rewrites") {
    testutil::TempDir dir("gen-base");
    testutil::write_file(dir / "corpus.txt",
                         "a dog runs\n"
                         "a cat sits\n"
                         "a bird flies\n");
    auto cfg = base_config(dir);
    cfg.mode = synth::PipelineMode::generative_baseline;

    ReplyProvider prov({"  A dog sprints across a field.  ", ""},
                       "A bird glides over the water.");
    auto result = pipeline::run_pipeline(cfg, &prov);

    REQUIRE(result.pairs.size() == 2);
    CHECK(result.pairs[0].caption_ids == std::vector<corpus::CaptionId>{0});
    CHECK(result.pairs[0].summary == "A dog sprints across a field.");
    CHECK(result.pairs[0].job->prompt_text == "A dog sprints across a field.");
    CHECK(result.pairs[1].caption_ids == std::vector<corpus::CaptionId>{2});
    CHECK(result.report.at("counts").at("selections_skipped") == 1);
}

TEST_CASE("retrieval baseline picks the nearest image and makes no jobs") {
    testutil::TempDir dir("retrieval");
    testutil::write_file(dir / "corpus.txt",
                         "a dog runs across the grass\n"
                         "two bikes lean against a wall\n"
                         "a chef slices fresh onions\n"
                         "a kite flies above the beach\n");
    auto cfg = base_config(dir);
    cfg.mode = synth::PipelineMode::retrieval_baseline;
    cfg.embedder.dim = 32;
    cfg.image_index = dir / "index.mat";

    // index rows are the embeddings of the captions themselves, so a condense
    // response equal to caption i must retrieve image i
    auto c = corpus::load_corpus(cfg.corpus.path, corpus::CorpusFormat::plain_lines);
    embed::TextEmbedder emb(cfg.embedder);
    emb.fit_idf(c);
    embed::EmbeddingMatrix m;
    m.dim = cfg.embedder.dim;
    std::vector<std::string> ids;
    for (const auto& cap : c.captions) {
        auto v = emb.embed(cap.tokens);
        m.data.insert(m.data.end(), v.begin(), v.end());
        ids.push_back("img" + std::to_string(cap.id));
    }
    embed::write_matrix_file(cfg.image_index, m, &ids);

    ReplyProvider prov({c.captions[0].text, c.captions[1].text, c.captions[2].text,
                        c.captions[3].text},
                       "unused");
    auto result = pipeline::run_pipeline(cfg, &prov);

    REQUIRE(result.pairs.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK_FALSE(result.pairs[i].job.has_value());
        CHECK(result.pairs[i].image_path.value() == "img" + std::to_string(i));
    }
    CHECK(result.report.at("counts").at("jobs_submitted") == 0);
    const std::string manifest = testutil::read_file(result.manifest_path);
    Json first = Json::parse(manifest.substr(0, manifest.find('\n')));
    CHECK(first.at("job").is_null());
    CHECK(first.at("image_path") == "img0");
}

TEST_CASE("config json: unknown keys are errors, nested fields land") {
    Json root;
    root["seed"] = 9;
    root["llm"]["reask_budget"] = 5;
    root["llm"]["fixture"] = "fix.jsonl";
    root["selection"]["min_sel"] = 2;
    root["gent"]["rounds"] = 4;
    auto cfg = config::config_from_json(root);
    CHECK(cfg.seed == 9);
    CHECK(cfg.gent.seed == 9);  // run seed propagates
    CHECK(cfg.policy.reask_budget == 5);
    CHECK(cfg.fixture_path == "fix.jsonl");
    CHECK(cfg.bounds.min_sel == 2);
    CHECK(cfg.gent.rounds == 4);

    Json typo;
    typo["corpus"]["pth"] = "x";
    CHECK_THROWS_WITH(config::config_from_json(typo),
                      Catch::Matchers::ContainsSubstring("corpus.pth"));
    Json bad_mode;
    bad_mode["mode"] = "warp";
    CHECK_THROWS_AS(config::config_from_json(bad_mode), ConfigError);
}

TEST_CASE("config hash tracks content and load_config rejects bad files") {
    config::RunConfig a;
    config::RunConfig b;
    CHECK(config::config_hash(a) == config::config_hash(b));
    b.seed = 1;
    CHECK(config::config_hash(a) != config::config_hash(b));

    testutil::TempDir dir("cfg");
    testutil::write_file(dir / "bad.json", "{not json");
    CHECK_THROWS_AS(config::load_config(dir / "bad.json"), ConfigError);
    CHECK_THROWS_AS(config::load_config(dir / "missing.json"), ConfigError);
    testutil::write_file(dir / "arr.json", "[1,2]");
    CHECK_THROWS_AS(config::load_config(dir / "arr.json"), ConfigError);
    testutil::write_file(dir / "ok.json", "{\"seed\": 3}");
    CHECK(config::load_config(dir / "ok.json").seed == 3);
}

TEST_CASE("validate_for_run enumerates every problem at once") {
    config::RunConfig cfg;  // no corpus path
    cfg.mode = synth::PipelineMode::sum_wo_sel;
    cfg.group_size = 3;
    cfg.sum_neighbors = 5;      // needs group_size >= 6
    cfg.bounds.min_sel = 0;     // invalid bounds
    cfg.chat.endpoint.clear();  // llm source missing
    try {
        config::validate_for_run(cfg);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("corpus.path is required") != std::string::npos);
        CHECK(msg.find("min_sel") != std::string::npos);
        CHECK(msg.find("sum_neighbors + 1") != std::string::npos);
        CHECK(msg.find("llm.endpoint or llm.fixture") != std::string::npos);
    }

    CHECK(config::needs_grouping(synth::PipelineMode::icsd));
    CHECK_FALSE(config::needs_grouping(synth::PipelineMode::gtg));
    CHECK(config::needs_llm(synth::PipelineMode::gtg));
    CHECK_FALSE(config::needs_llm(synth::PipelineMode::uni_context));
}
