#pragma once

#include "attnlab/attention.hpp"
#include "attnlab/bench.hpp"
#include "attnlab/gradcheck.hpp"
#include "attnlab/model.hpp"
#include "attnlab/ops.hpp"
#include "attnlab/training.hpp"
#include "attnlab/verify.hpp"
