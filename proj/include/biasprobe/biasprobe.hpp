#pragma once

#include "biasprobe/corpus.hpp"
#include "biasprobe/error.hpp"
#include "biasprobe/llmgate.hpp"
#include "biasprobe/pipeline.hpp"
#include "biasprobe/promptkit.hpp"
#include "biasprobe/questgen.hpp"
#include "biasprobe/report.hpp"
#include "biasprobe/scoring.hpp"
#include "biasprobe/tagging.hpp"
#include "biasprobe/text.hpp"
#include "biasprobe/vocabulary.hpp"
