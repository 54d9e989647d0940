#pragma once

#include "eks/checkpoint.hpp"
#include "eks/conv.hpp"
#include "eks/data.hpp"
#include "eks/eks_layer.hpp"
#include "eks/losses.hpp"
#include "eks/model.hpp"
#include "eks/rng.hpp"
#include "eks/serialize.hpp"
#include "eks/tensor.hpp"
#include "eks/train.hpp"
#include "eks/verify.hpp"
