#pragma once

// Umbrella header for the PA-CFL simulator library.

#include "pacfl/boosting.hpp"
#include "pacfl/clustering.hpp"
#include "pacfl/csv.hpp"
#include "pacfl/dataset.hpp"
#include "pacfl/evaluation.hpp"
#include "pacfl/experiment.hpp"
#include "pacfl/federation.hpp"
#include "pacfl/forecaster.hpp"
#include "pacfl/matrix.hpp"
#include "pacfl/privacy.hpp"
#include "pacfl/rng.hpp"
#include "pacfl/stats.hpp"
#include "pacfl/synthetic.hpp"
#include "pacfl/version.hpp"
