#pragma once

#include "pvi/errors.hpp"
#include "pvi/numerics.hpp"
#include "pvi/models.hpp"
#include "pvi/dataset.hpp"
#include "pvi/ensemble.hpp"
#include "pvi/jensen.hpp"
#include "pvi/pacbayes.hpp"
#include "pvi/updates.hpp"
#include "pvi/harness/config.hpp"
#include "pvi/harness/data_io.hpp"
#include "pvi/harness/experiments.hpp"
#include "pvi/harness/bandit.hpp"
#include "pvi/harness/verify.hpp"
#include "pvi/harness/report_io.hpp"
