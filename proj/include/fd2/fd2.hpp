#pragma once

#include "fd2/tensor.hpp"
#include "fd2/ops.hpp"
#include "fd2/autodiff.hpp"
#include "fd2/ad_ops.hpp"
#include "fd2/dct.hpp"
#include "fd2/layers.hpp"
#include "fd2/fde.hpp"
#include "fd2/mrm.hpp"
#include "fd2/training.hpp"
#include "fd2/fdt.hpp"
#include "fd2/config.hpp"
#include "fd2/verify.hpp"
