#pragma once

// Umbrella header: the whole toolkit.

#include "icsd/config.hpp"      // IWYU pragma: export
#include "icsd/corpus.hpp"      // IWYU pragma: export
#include "icsd/corpusgen.hpp"   // IWYU pragma: export
#include "icsd/embed.hpp"       // IWYU pragma: export
#include "icsd/errors.hpp"      // IWYU pragma: export
#include "icsd/group.hpp"       // IWYU pragma: export
#include "icsd/hash.hpp"        // IWYU pragma: export
#include "icsd/jsonl.hpp"       // IWYU pragma: export
#include "icsd/llm.hpp"         // IWYU pragma: export
#include "icsd/metrics.hpp"     // IWYU pragma: export
#include "icsd/pipeline.hpp"    // IWYU pragma: export
#include "icsd/prompt_templates.hpp"  // IWYU pragma: export
#include "icsd/store.hpp"       // IWYU pragma: export
#include "icsd/synth.hpp"       // IWYU pragma: export
#include "icsd/util.hpp"        // IWYU pragma: export
#include "icsd/version.hpp"     // IWYU pragma: export
