#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "icsd/errors.hpp"
#include "icsd/jsonl.hpp"

// Prompt templates are embedded as versioned constants so a binary always
// carries exactly the text it was tested with. Bump the version tag whenever
// the wording changes; downstream artifacts record the tag.

namespace icsd::prompts {

inline constexpr const char* kSelectSummarizeVersion = "select-summarize/v1";
inline constexpr const char* kSummarizeVersion = "summarize/v1";
inline constexpr const char* kCondenseVersion = "condense/v1";
inline constexpr const char* kGentVersion = "gent/v1";

namespace detail {

inline std::string json_quote(const std::string& s) {
    return Json(s).dump();  // quoted + escaped
}

inline std::string numbered_list(const std::vector<std::string>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        out += "\n";
        out += std::to_string(i + 1);
        out += ". ";
        out += items[i];
    }
    return out;
}

}  // namespace detail

// Selection + summarization over a numbered candidate list. The model must
// answer with JSON {"index": list, "summary": str}; indices are 1-based into
// the list rendered below the instructions.
inline std::string render_select_summarize(const std::vector<std::string>& candidates,
                                           std::size_t min_sel = 3, std::size_t max_sel = 8,
                                           std::size_t max_summary_words = 50) {
    if (candidates.empty()) throw DataError("render_select_summarize: empty candidate list");
    std::string p;
    p += "Select and summary sentences in the given sentences set. You should find ";
    p += std::to_string(min_sel);
    p += " to ";
    p += std::to_string(max_sel);
    p += " sentences that form a description from the same or different views of the same "
         "image. The meanings of the selected sentences in a group should not conflict with "
         "each other. Summarize the sentences as one not exceed ";
    p += std::to_string(max_summary_words);
    p += " words to describe the scene in objective style. The summary sentence must be "
         "objective and concise, without ambiguity and uncertainty. Return the selected index "
         "and the summarized sentence in json format like {\"index\": list,\"summary\": str}. "
         "Return directly the json format results without explanation. The given sentences "
         "set are:";
    p += detail::numbered_list(candidates);
    return p;
}

// Summarization without the selection step (the whole list is merged).
inline std::string render_summarize(const std::vector<std::string>& sentences,
                                    std::size_t max_summary_words = 50) {
    if (sentences.empty()) throw DataError("render_summarize: empty sentence list");
    std::string p;
    p += "Summarize the given sentences as one not exceed ";
    p += std::to_string(max_summary_words);
    p += " words to describe the scene in objective style. The summary sentence must be "
         "objective and concise, without ambiguity and uncertainty. Return the summarized "
         "sentence in json format like {\"summary\": str}. Return directly the json format "
         "results without explanation. The given sentences set are:";
    p += detail::numbered_list(sentences);
    return p;
}

// Expand one simple caption into a detailed scene description.
inline std::string render_condense(const std::string& caption) {
    if (caption.empty()) throw DataError("render_condense: empty caption");
    std::string p;
    p += "Make up a more detailed scene description that matches an input caption. The "
         "description must be one objective sentence depicting a realistic scene, without "
         "ambiguity and uncertainty. Return directly the description without explanation. "
         "The input caption is: ";
    p += detail::json_quote(caption);
    return p;
}

// Caption generation from an object pool. The header count reflects the list
// actually rendered; sentence count and length bounds come from config.
inline std::string render_gent(const std::vector<std::string>& objects,
                               std::size_t sentences_per_prompt = 100,
                               std::size_t min_words = 8, std::size_t max_words = 15) {
    if (objects.empty()) throw DataError("render_gent: empty object list");
    std::string p;
    p += "Given ";
    p += std::to_string(objects.size());
    p += " objects [ ";
    for (std::size_t i = 0; i < objects.size(); ++i) {
        if (i) p += ", ";
        p += objects[i];
    }
    p += "]\n";
    p += "Using the provided objects to generate captions that describe real-world images in "
         "an objective manner.\n";
    p += "The generated sentences are captions for images, the scene described in the "
         "sentence must be reasonably realistic.\n";
    p += "The generate ";
    p += std::to_string(sentences_per_prompt);
    p += " sentences should follow these requirements:\n";
    p += "1. Descriptive: The captions provide clear and accurate descriptions of the "
         "objects and actions in the scene.\n";
    p += "2. Concise: The captions are no longer than ";
    p += std::to_string(max_words);
    p += " words, but more than ";
    p += std::to_string(min_words);
    p += " words.\n";
    p += "3. Objective: The descriptions focus on the factual aspects of the scene, avoiding "
         "subjective interpretations or emotions.\n";
    p += "4. Present tense: The captions describe events happening in the present moment, "
         "not past or future events.\n";
    p += "5. No adverbs: The sentences do not contain adverbs, making the descriptions more "
         "straightforward.\n";
    p += "6. Avoid starting with certain phrases: The captions do not begin with phrases "
         "like 'There', 'An image', or 'A photo of'.\n";
    p += "Please output the sentences with ';' as the separator.";
    return p;
}

}  // namespace icsd::prompts
