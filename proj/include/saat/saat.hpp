#pragma once

#include "errors.hpp"
#include "tensor.hpp"
#include "random.hpp"
#include "autograd.hpp"
#include "ops.hpp"
#include "gradcheck.hpp"
#include "windowing.hpp"
#include "attention.hpp"
#include "config.hpp"
#include "blocks.hpp"
#include "model.hpp"
#include "checkpoint.hpp"
#include "image.hpp"
#include "train.hpp"
#include "verify.hpp"
