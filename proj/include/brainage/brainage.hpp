#pragma once

#include "brainage/activity.hpp"
#include "brainage/age_regression.hpp"
#include "brainage/cohort.hpp"
#include "brainage/commands.hpp"
#include "brainage/csv.hpp"
#include "brainage/errors.hpp"
#include "brainage/fit.hpp"
#include "brainage/low_rank_model.hpp"
#include "brainage/parallel.hpp"
#include "brainage/rng.hpp"
#include "brainage/synthetic.hpp"
