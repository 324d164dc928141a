#pragma once

#include "envisions/environments.hpp"
#include "envisions/metrics.hpp"
#include "envisions/policy.hpp"
#include "envisions/selftrain.hpp"
#include "envisions/tensor.hpp"
#include "envisions/trajectory.hpp"
