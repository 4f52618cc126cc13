#pragma once

#include "uacvae/autograd.hpp"
#include "uacvae/corpus.hpp"
#include "uacvae/errors.hpp"
#include "uacvae/latent.hpp"
#include "uacvae/metrics.hpp"
#include "uacvae/model.hpp"
#include "uacvae/params.hpp"
#include "uacvae/tensor.hpp"
#include "uacvae/trainer.hpp"
#include "uacvae/ue.hpp"
