// Batch CLI for the multi-context synthetic captioning pipeline.
//
// Every subcommand reads an optional JSON config file (--config) and applies
// flag overrides on top. Exit codes: 0 ok, 2 config error, 3 provider error,
// 4 data error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <icsd/icsd.hpp>

namespace {

using icsd::config::RunConfig;

struct CommonFlags {
    std::string config_path;
    std::optional<std::string> corpus;
    std::optional<std::string> format;
    std::optional<std::string> output_dir;
    std::optional<std::string> mode;
    std::optional<std::string> vocab;
    std::optional<std::string> embedder_mode;
    std::optional<std::size_t> dim;
    std::optional<std::string> fixture;
    std::optional<std::string> llm_endpoint;
    std::optional<std::string> llm_model;
    std::optional<std::string> image_index;
    std::optional<std::string> image_backend;
    std::optional<std::size_t> group_size;
    std::optional<std::size_t> min_sel;
    std::optional<std::size_t> max_sel;
    std::optional<std::size_t> max_summary_words;
    std::optional<std::size_t> sum_neighbors;
    std::optional<std::size_t> threads;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "JSON config file; flags override its values");
    cmd->add_option("--corpus", f.corpus, "input corpus path");
    cmd->add_option("--corpus-format", f.format, "plain-lines or jsonl");
    cmd->add_option("--output-dir", f.output_dir, "artifact directory (default: out)");
    cmd->add_option("--mode", f.mode,
                    "pipeline mode: uni_context, sel_wo_sum, sum_wo_sel, icsd, gtg, "
                    "retrieval_baseline, generative_baseline (default: icsd)");
    cmd->add_option("--vocab", f.vocab, "vocabulary file for the exact-vocab embedder");
    cmd->add_option("--embedder", f.embedder_mode,
                    "embedder: exact-vocab, hashed-ngram, remote (default: hashed-ngram)");
    cmd->add_option("--dim", f.dim, "hashed-ngram embedding dimension (default: 256)");
    cmd->add_option("--fixture", f.fixture, "jsonl fixture driving the mock chat provider");
    cmd->add_option("--llm-endpoint", f.llm_endpoint, "chat-completions endpoint URL");
    cmd->add_option("--llm-model", f.llm_model, "chat model name (default: gpt-3.5-turbo)");
    cmd->add_option("--image-index", f.image_index,
                    "image feature file for retrieval_baseline");
    cmd->add_option("--image-backend", f.image_backend,
                    "image generation backend: stub, http, none (default: stub)");
    cmd->add_option("--group-size", f.group_size,
                    "captions per group, query included (default: 30)");
    cmd->add_option("--min-sel", f.min_sel, "minimum captions per selection (default: 3)");
    cmd->add_option("--max-sel", f.max_sel, "maximum captions per selection (default: 8)");
    cmd->add_option("--max-summary-words", f.max_summary_words,
                    "summary length cap in words (default: 50)");
    cmd->add_option("--sum-neighbors", f.sum_neighbors,
                    "neighbors summarized in sum_wo_sel mode (default: 5)");
    cmd->add_option("--threads", f.threads, "worker threads, 0 = hardware (default: 0)");
    cmd->add_option("--seed", f.seed, "run seed for sampling and job seeds (default: 0)");
}

RunConfig build_config(const CommonFlags& f) {
    RunConfig cfg;
    if (!f.config_path.empty()) cfg = icsd::config::load_config(f.config_path);
    if (f.corpus) cfg.corpus.path = *f.corpus;
    if (f.format) cfg.corpus.format = icsd::corpus::corpus_format_from(*f.format);
    if (f.output_dir) cfg.output_dir = *f.output_dir;
    if (f.mode) cfg.mode = icsd::synth::mode_from_string(*f.mode);
    if (f.vocab) cfg.vocab_path = *f.vocab;
    if (f.embedder_mode) cfg.embedder.mode = icsd::embed::embedder_mode_from(*f.embedder_mode);
    if (f.dim) cfg.embedder.dim = *f.dim;
    if (f.fixture) cfg.fixture_path = *f.fixture;
    if (f.llm_endpoint) cfg.chat.endpoint = *f.llm_endpoint;
    if (f.llm_model) cfg.chat.model = *f.llm_model;
    if (f.image_index) cfg.image_index = *f.image_index;
    if (f.image_backend) cfg.image_backend = *f.image_backend;
    if (f.group_size) cfg.group_size = *f.group_size;
    if (f.min_sel) cfg.bounds.min_sel = *f.min_sel;
    if (f.max_sel) cfg.bounds.max_sel = *f.max_sel;
    if (f.max_summary_words) cfg.max_summary_words = *f.max_summary_words;
    if (f.sum_neighbors) cfg.sum_neighbors = *f.sum_neighbors;
    if (f.threads) cfg.threads = *f.threads;
    if (f.seed) {
        cfg.seed = *f.seed;
        cfg.gent.seed = *f.seed;
    }
    return cfg;
}

void require_corpus(const RunConfig& cfg) {
    if (cfg.corpus.path.empty())
        throw icsd::ConfigError("no corpus given: pass --corpus or set corpus.path in the config");
    if (!std::filesystem::exists(cfg.corpus.path))
        throw icsd::ConfigError("corpus path does not exist: " + cfg.corpus.path.string());
}

void check_group_size(const RunConfig& cfg) {
    if (cfg.group_size < 2)
        throw icsd::ConfigError("--group-size must be >= 2 (a query plus at least one neighbor)");
}

// Stages shared by the group/cover/select prefix commands.
struct GroupFlow {
    icsd::corpus::CorpusHandle corpus;
    std::vector<icsd::group::Group> groups;
    std::vector<std::size_t> order;
    std::uint64_t flow_key = 0;
};

GroupFlow run_group_flow(const RunConfig& cfg, bool with_cover) {
    GroupFlow flow;
    flow.corpus = icsd::pipeline::ingest_stage(cfg);
    if (cfg.mode == icsd::synth::PipelineMode::gtg) {
        const std::uint64_t gk =
            icsd::hash_combine(icsd::corpus::content_hash(flow.corpus),
                               icsd::fnv1a64("gtg-groups"));
        flow.groups = icsd::pipeline::gtg_groups_stage(cfg, flow.corpus, gk);
        flow.order.resize(flow.groups.size());
        for (std::size_t i = 0; i < flow.order.size(); ++i) flow.order[i] = i;
        flow.flow_key = gk;
        return flow;
    }
    check_group_size(cfg);
    icsd::embed::TextEmbedder key_embedder(icsd::pipeline::detail::embedder_config(cfg));
    key_embedder.fit_idf(flow.corpus);
    auto matrix = icsd::pipeline::embed_stage(cfg, flow.corpus);
    const std::uint64_t gk =
        icsd::pipeline::groups_stage_key(cfg, flow.corpus, key_embedder.fingerprint());
    flow.groups = icsd::pipeline::groups_stage(cfg, flow.corpus, matrix, gk);
    flow.flow_key = gk;
    if (with_cover) {
        flow.order = icsd::pipeline::cover_stage(cfg, flow.corpus, flow.groups, gk);
        flow.flow_key = icsd::hash_combine(gk, icsd::fnv1a64("cover"));
    }
    return flow;
}

int cmd_ingest(const CommonFlags& f) {
    RunConfig cfg = build_config(f);
    require_corpus(cfg);
    auto c = icsd::pipeline::ingest_stage(cfg);
    std::cout << "corpus: " << c.size() << " captions -> "
              << (cfg.output_dir / "corpus.jsonl").string() << "\n"
              << "  read " << c.manifest.records_read << ", blanks "
              << c.manifest.blanks_skipped << ", length-filtered "
              << c.manifest.length_filtered << ", duplicates "
              << c.manifest.duplicates_dropped << "\n";
    return 0;
}

int cmd_embed(const CommonFlags& f) {
    RunConfig cfg = build_config(f);
    require_corpus(cfg);
    auto c = icsd::pipeline::ingest_stage(cfg);
    auto m = icsd::pipeline::embed_stage(cfg, c);
    std::cout << "embeddings: " << m.rows() << " x " << m.dim << " (fingerprint " << m.fingerprint
              << ")\n";
    return 0;
}

int cmd_group(const CommonFlags& f) {
    RunConfig cfg = build_config(f);
    require_corpus(cfg);
    auto flow = run_group_flow(cfg, /*with_cover=*/false);
    std::cout << "groups: " << flow.groups.size() << " of size "
              << (flow.groups.empty() ? 0 : flow.groups.front().member_ids.size()) << " -> "
              << (cfg.output_dir / "groups.jsonl").string() << "\n";
    return 0;
}

int cmd_cover(const CommonFlags& f) {
    RunConfig cfg = build_config(f);
    require_corpus(cfg);
    auto flow = run_group_flow(cfg, /*with_cover=*/true);
    std::cout << "cover: " << flow.order.size() << " of " << flow.groups.size()
              << " groups cover all " << flow.corpus.size() << " captions -> "
              << (cfg.output_dir / "cover.jsonl").string() << "\n";
    return 0;
}

int cmd_select(const CommonFlags& f) {
    RunConfig cfg = build_config(f);
    if (!icsd::config::needs_grouping(cfg.mode) && cfg.mode != icsd::synth::PipelineMode::gtg)
        cfg.mode = icsd::synth::PipelineMode::icsd;
    icsd::config::validate_for_run(cfg);
    auto flow = run_group_flow(cfg, cfg.mode != icsd::synth::PipelineMode::gtg);
    auto llm_ctx = icsd::pipeline::make_llm_context(cfg);
    const auto key = icsd::pipeline::selections_stage_key(cfg, flow.flow_key);
    const auto records = icsd::pipeline::selections_stage(cfg, flow.corpus, flow.groups,
                                                          flow.order, *llm_ctx.client, key);
    std::size_t accepted = 0, rejected = 0, skipped = 0;
    for (const auto& rec : records) {
        const auto status = rec.at("status").get<std::string>();
        if (status == "accepted")
            ++accepted;
        else if (status == "rejected")
            ++rejected;
        else
            ++skipped;
    }
    std::cout << "selections: " << accepted << " accepted, " << rejected << " rejected, "
              << skipped << " skipped of " << records.size() << " groups -> "
              << (cfg.output_dir / "selections.jsonl").string() << "\n";
    return 0;
}

int run_full(const CommonFlags& f, bool force_no_images) {
    RunConfig cfg = build_config(f);
    if (force_no_images) cfg.image_backend = "none";
    auto res = icsd::pipeline::run_pipeline(cfg);
    std::cout << "manifest: " << res.pairs.size() << " pairs -> "
              << res.manifest_path.string() << "\n"
              << "report:   " << res.report_path.string() << "\n";
    const auto& counts = res.report["counts"];
    if (counts["groups_in"].get<std::size_t>() > 0) {
        std::cout << "groups:   " << counts["groups_in"] << " in, "
                  << counts["selections_accepted"] << " accepted, "
                  << counts["selections_rejected"] << " rejected, "
                  << counts["selections_skipped"] << " skipped\n";
    }
    if (counts["jobs_submitted"].get<std::size_t>() > 0)
        std::cout << "images:   " << counts["jobs_submitted"] << " jobs submitted\n";
    return 0;
}

int cmd_gent_objects(const CommonFlags& f, const std::vector<std::string>& coco,
                     const std::vector<std::string>& vg, const std::vector<std::string>& common) {
    RunConfig cfg = build_config(f);
    std::vector<std::pair<std::filesystem::path, icsd::gent::ObjectProvenance>> sources =
        cfg.gent_sources;
    for (const auto& p : coco) sources.emplace_back(p, icsd::gent::ObjectProvenance::coco80);
    for (const auto& p : vg) sources.emplace_back(p, icsd::gent::ObjectProvenance::vg_sample);
    for (const auto& p : common)
        sources.emplace_back(p, icsd::gent::ObjectProvenance::llm_common);
    if (sources.empty())
        throw icsd::ConfigError("no object sources: pass --coco/--vg/--common or gent.sources");
    auto pool = icsd::gent::build_object_pool(sources);
    std::filesystem::create_directories(cfg.output_dir);
    const auto out_path = cfg.output_dir / "objects.txt";
    {
        std::ofstream out(out_path, std::ios::trunc);
        for (const auto& o : pool.objects) out << o << "\n";
    }
    std::cout << "object pool: " << pool.size() << " objects -> " << out_path.string() << "\n";
    for (const auto& [prov, n] : pool.source_counts)
        std::cout << "  " << prov << ": " << n << "\n";
    return 0;
}

int cmd_gent_run(const CommonFlags& f, const std::vector<std::string>& coco,
                 const std::vector<std::string>& vg, const std::vector<std::string>& common,
                 std::optional<std::size_t> rounds, std::optional<std::size_t> target) {
    RunConfig cfg = build_config(f);
    std::vector<std::pair<std::filesystem::path, icsd::gent::ObjectProvenance>> sources =
        cfg.gent_sources;
    for (const auto& p : coco) sources.emplace_back(p, icsd::gent::ObjectProvenance::coco80);
    for (const auto& p : vg) sources.emplace_back(p, icsd::gent::ObjectProvenance::vg_sample);
    for (const auto& p : common)
        sources.emplace_back(p, icsd::gent::ObjectProvenance::llm_common);
    if (sources.empty())
        throw icsd::ConfigError("no object sources: pass --coco/--vg/--common or gent.sources");
    if (cfg.fixture_path.empty() && cfg.chat.endpoint.empty())
        throw icsd::ConfigError("gent-run needs --fixture or --llm-endpoint");
    if (rounds) cfg.gent.rounds = *rounds;
    if (target) cfg.gent.target_sentences = *target;

    auto pool = icsd::gent::build_object_pool(sources);
    if (cfg.gent.objects_per_prompt > pool.size()) cfg.gent.objects_per_prompt = pool.size();
    auto llm_ctx = icsd::pipeline::make_llm_context(cfg);
    auto res = icsd::gent::run_gent(*llm_ctx.client, pool, cfg.gent);

    std::filesystem::create_directories(cfg.output_dir);
    const auto out_path = cfg.output_dir / "gent.jsonl";
    icsd::corpus::save_canonical(res.corpus, out_path);
    std::cout << "gent: " << res.corpus.size() << " sentences kept -> " << out_path.string()
              << "\n"
              << "  rounds " << res.rounds_run << ", received " << res.received
              << ", length-filtered " << res.length_filtered << ", duplicates "
              << res.duplicates << "\n";
    return 0;
}

int cmd_eval(const std::string& hyp, const std::string& ref, const std::string& smoothing,
             const std::string& report_path) {
    const auto pairs = icsd::metrics::load_eval_pairs(hyp, ref);
    const auto smooth = smoothing == "add_one" ? icsd::metrics::BleuSmoothing::add_one
                                               : icsd::metrics::BleuSmoothing::none;
    if (smoothing != "none" && smoothing != "add_one")
        throw icsd::ConfigError("--smoothing must be none or add_one");
    const auto report = icsd::metrics::evaluate(pairs, smooth);
    std::cout << icsd::metrics::render_table(report);
    if (!report_path.empty()) {
        std::ofstream out(report_path, std::ios::trunc);
        if (!out) throw icsd::DataError("cannot write " + report_path);
        out << icsd::metrics::report_to_json(report).dump(2) << "\n";
        std::cout << "report -> " << report_path << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-context synthetic captioning dataset pipeline"};
    app.require_subcommand(1);
    app.set_version_flag("--version",
                         std::string(icsd::kToolName) + " " + icsd::kToolVersion);

    CommonFlags ingest_f, embed_f, group_f, cover_f, select_f, assemble_f, genjobs_f, run_f,
        gentobj_f, gentrun_f;

    auto* c_ingest = app.add_subcommand("ingest", "parse, filter, and canonicalize a corpus");
    add_common(c_ingest, ingest_f);
    auto* c_embed = app.add_subcommand("embed", "embed the corpus and cache the vectors");
    add_common(c_embed, embed_f);
    auto* c_group = app.add_subcommand("group", "build top-k similarity groups");
    add_common(c_group, group_f);
    auto* c_cover = app.add_subcommand("cover", "greedy-cover the corpus with groups");
    add_common(c_cover, cover_f);
    auto* c_select = app.add_subcommand("select", "run LLM selection/summarization over groups");
    add_common(c_select, select_f);
    auto* c_assemble =
        app.add_subcommand("assemble", "build pairs and the manifest (no image jobs)");
    add_common(c_assemble, assemble_f);
    auto* c_genjobs =
        app.add_subcommand("gen-jobs", "submit image-generation jobs for the manifest");
    add_common(c_genjobs, genjobs_f);
    auto* c_run = app.add_subcommand("run", "end-to-end: ingest through manifest and images");
    add_common(c_run, run_f);

    auto* c_gentobj = app.add_subcommand("gent-objects", "build the object pool");
    add_common(c_gentobj, gentobj_f);
    std::vector<std::string> objs_coco, objs_vg, objs_common;
    c_gentobj->add_option("--coco", objs_coco, "object list file (coco80 provenance)");
    c_gentobj->add_option("--vg", objs_vg, "object list file (vg_sample provenance)");
    c_gentobj->add_option("--common", objs_common, "object list file (llm_common provenance)");

    auto* c_gentrun = app.add_subcommand("gent-run", "generate a corpus from the object pool");
    add_common(c_gentrun, gentrun_f);
    std::vector<std::string> run_coco, run_vg, run_common;
    std::optional<std::size_t> gent_rounds, gent_target;
    c_gentrun->add_option("--coco", run_coco, "object list file (coco80 provenance)");
    c_gentrun->add_option("--vg", run_vg, "object list file (vg_sample provenance)");
    c_gentrun->add_option("--common", run_common, "object list file (llm_common provenance)");
    c_gentrun->add_option("--rounds", gent_rounds, "prompt rounds to run (default: 1)");
    c_gentrun->add_option("--target", gent_target,
                          "stop once this many sentences are kept (default: off)");

    auto* c_eval = app.add_subcommand("eval", "score hypotheses against references");
    std::string eval_hyp, eval_ref, eval_smoothing = "none", eval_report;
    c_eval->add_option("--hyp", eval_hyp, "hypothesis jsonl: {\"image_key\",\"caption\"}")
        ->required();
    c_eval->add_option("--ref", eval_ref, "reference jsonl: {\"image_key\",\"captions\":[...]}")
        ->required();
    c_eval->add_option("--smoothing", eval_smoothing, "BLEU smoothing: none or add_one")
        ->capture_default_str();
    c_eval->add_option("--report", eval_report, "also write the full JSON report here");

    CLI11_PARSE(app, argc, argv);

    try {
        if (c_ingest->parsed()) return cmd_ingest(ingest_f);
        if (c_embed->parsed()) return cmd_embed(embed_f);
        if (c_group->parsed()) return cmd_group(group_f);
        if (c_cover->parsed()) return cmd_cover(cover_f);
        if (c_select->parsed()) return cmd_select(select_f);
        if (c_assemble->parsed()) return run_full(assemble_f, /*force_no_images=*/true);
        if (c_genjobs->parsed()) return run_full(genjobs_f, /*force_no_images=*/false);
        if (c_run->parsed()) return run_full(run_f, /*force_no_images=*/false);
        if (c_gentobj->parsed()) return cmd_gent_objects(gentobj_f, objs_coco, objs_vg, objs_common);
        if (c_gentrun->parsed())
            return cmd_gent_run(gentrun_f, run_coco, run_vg, run_common, gent_rounds, gent_target);
        if (c_eval->parsed()) return cmd_eval(eval_hyp, eval_ref, eval_smoothing, eval_report);
    } catch (const icsd::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const icsd::ProviderError& e) {
        std::cerr << "provider error: " << e.what() << "\n";
        return 3;
    } catch (const icsd::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
