#include <catch2/catch_amalgamated.hpp>

#include "icsd/corpus.hpp"
#include "test_util.hpp"

using namespace icsd;
using testutil::TempDir;
using testutil::write_file;

TEST_CASE("tokenize lowercases, strips punctuation, splits on whitespace") {
    CHECK(corpus::tokenize("A dog runs.") == std::vector<std::string>{"a", "dog", "runs"});
    CHECK(corpus::tokenize("  Hello,   WORLD!  ") == std::vector<std::string>{"hello", "world"});
    CHECK(corpus::tokenize("don't-stop") == std::vector<std::string>{"dontstop"});
    CHECK(corpus::tokenize("") == std::vector<std::string>{});
    CHECK(corpus::tokenize("...") == std::vector<std::string>{});
    CHECK(corpus::tokenize("one\ttwo\nthree") == std::vector<std::string>{"one", "two", "three"});
}

TEST_CASE("join_tokens is the inverse presentation of tokenize output") {
    CHECK(corpus::join_tokens({"a", "b", "c"}) == "a b c");
    CHECK(corpus::join_tokens({}) == "");
}

TEST_CASE("plain-lines corpus load counts blanks and normalizes whitespace") {
    TempDir dir("corpus");
    write_file(dir / "c.txt", "a cat sits\n\n  a   dog\t runs \n\n");
    auto c = corpus::load_corpus(dir / "c.txt", corpus::CorpusFormat::plain_lines);
    REQUIRE(c.size() == 2);
    CHECK(c.captions[0].text == "a cat sits");
    CHECK(c.captions[1].text == "a dog runs");
    CHECK(c.captions[1].tokens == std::vector<std::string>{"a", "dog", "runs"});
    CHECK(c.manifest.records_read == 4);
    CHECK(c.manifest.blanks_skipped == 2);
    CHECK(c.captions[0].id == 0);
    CHECK(c.captions[1].id == 1);
}

TEST_CASE("jsonl corpus load reads text, source, and image_id") {
    TempDir dir("corpus");
    write_file(dir / "c.jsonl",
               "{\"text\": \"a cat\", \"image_id\": \"img1\", \"source\": \"annotated\"}\n"
               "{\"text\": \"a dog\", \"image_id\": 7}\n"
               "{\"text\": \"a bird\"}\n");
    auto c = corpus::load_corpus(dir / "c.jsonl", corpus::CorpusFormat::jsonl);
    REQUIRE(c.size() == 3);
    CHECK(c.captions[0].image_id == "img1");
    CHECK(c.captions[0].source == corpus::CaptionSource::annotated);
    CHECK(c.captions[1].image_id == "7");
    CHECK_FALSE(c.captions[2].image_id.has_value());

    write_file(dir / "bad.jsonl", "{\"caption\": \"no text field\"}\n");
    CHECK_THROWS_AS(corpus::load_corpus(dir / "bad.jsonl", corpus::CorpusFormat::jsonl),
                    DataError);
}

TEST_CASE("filter_by_length keeps the inclusive range and re-densifies ids") {
    TempDir dir("corpus");
    write_file(dir / "c.txt", "one\none two\none two three\none two three four\n");
    auto c = corpus::load_corpus(dir / "c.txt", corpus::CorpusFormat::plain_lines);
    auto f = corpus::filter_by_length(c, 2, 3);
    REQUIRE(f.size() == 2);
    CHECK(f.captions[0].text == "one two");
    CHECK(f.captions[0].id == 0);
    CHECK(f.captions[1].id == 1);
    CHECK(f.manifest.length_filtered == 2);
    CHECK(f.manifest.original_ids == std::vector<corpus::CaptionId>{1, 2});
    CHECK_THROWS_AS(corpus::filter_by_length(c, 5, 2), ConfigError);
}

TEST_CASE("dedup drops exact token-sequence repeats, first kept") {
    TempDir dir("corpus");
    write_file(dir / "c.txt", "A dog runs\na  dog runs.\na cat\nA CAT!\nunique one here\n");
    auto c = corpus::load_corpus(dir / "c.txt", corpus::CorpusFormat::plain_lines);
    auto d = corpus::dedup(c);
    REQUIRE(d.size() == 3);
    CHECK(d.captions[0].text == "A dog runs");
    CHECK(d.manifest.duplicates_dropped == 2);
}

TEST_CASE("canonical save/load round-trips content") {
    TempDir dir("corpus");
    write_file(dir / "c.jsonl", "{\"text\": \"a cat on a mat\", \"image_id\": \"i1\"}\n");
    auto c = corpus::load_corpus(dir / "c.jsonl", corpus::CorpusFormat::jsonl,
                                 corpus::CaptionSource::annotated);
    corpus::save_canonical(c, dir / "canon.jsonl");
    auto back = corpus::load_canonical(dir / "canon.jsonl");
    REQUIRE(back.size() == 1);
    CHECK(back.captions[0].text == c.captions[0].text);
    CHECK(back.captions[0].tokens == c.captions[0].tokens);
    CHECK(back.captions[0].image_id == c.captions[0].image_id);
    CHECK(back.captions[0].source == corpus::CaptionSource::annotated);
    CHECK(corpus::content_hash(back) == corpus::content_hash(c));
}

TEST_CASE("content_hash tracks text and image ids") {
    corpus::CorpusHandle a, b;
    corpus::Caption cap;
    cap.text = "a dog";
    cap.tokens = corpus::tokenize(cap.text);
    a.captions.push_back(cap);
    b.captions.push_back(cap);
    CHECK(corpus::content_hash(a) == corpus::content_hash(b));
    b.captions[0].image_id = "img";
    CHECK(corpus::content_hash(a) != corpus::content_hash(b));
    b.captions[0].image_id.reset();
    b.captions[0].text = "a cat";
    CHECK(corpus::content_hash(a) != corpus::content_hash(b));
}

TEST_CASE("CorpusHandle::at bounds-checks") {
    corpus::CorpusHandle c;
    CHECK_THROWS_AS(c.at(0), DataError);
}
