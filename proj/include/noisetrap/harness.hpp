#pragma once

// Experiment plumbing: config files, run manifests, the experiment registry
// and run comparison.
#include "noisetrap/harness/config.hpp"
#include "noisetrap/harness/csv.hpp"
#include "noisetrap/harness/experiments.hpp"
#include "noisetrap/harness/manifest.hpp"
