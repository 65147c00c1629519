#pragma once

// Everything except the HTTP transport (see http_transport.hpp).

#include "gmner/core.hpp"
#include "gmner/crf.hpp"
#include "gmner/embedding.hpp"
#include "gmner/error.hpp"
#include "gmner/eval.hpp"
#include "gmner/hash.hpp"
#include "gmner/icl_selector.hpp"
#include "gmner/llm_gateway.hpp"
#include "gmner/pipeline.hpp"
#include "gmner/prompts.hpp"
#include "gmner/refine_ground.hpp"
#include "gmner/synthesis.hpp"
#include "gmner/uncertainty.hpp"
