import math

import numpy as np
import pytest

from bnas import search
from bnas.cells import ArchParams
from bnas.data import as_batch, synthetic_blobs
from bnas.optim import Diverged
from bnas.search import (
    EpochRecord,
    SearchConfig,
    arch_entropy,
    derive_genotype,
    diversity_term,
    init_search,
    learnable_fraction,
    relative_increase,
    run_search,
    select_op,
    selection_diversity_metric,
)
from bnas.searchspace import SEARCH_SPACE
from bnas.tensor import NonFiniteError, Tensor, default_dtype

LN7 = math.log(7)


def _arch(normal, reduce=None):
    with default_dtype(np.float64):
        return ArchParams(
            Tensor(normal, requires_grad=True),
            Tensor(normal if reduce is None else reduce, requires_grad=True),
        )


def _one_hot(op_index, scale=50.0):
    logits = np.zeros((14, 7))
    logits[:, op_index] = scale
    return logits


def _tiny_config(**overrides):
    base = dict(num_cells=3, init_channels=4, epochs=2, batch_size=8, seed=3)
    base.update(overrides)
    return SearchConfig(**base)


@pytest.fixture(scope="module")
def blobs():
    return synthetic_blobs(classes=2, n=32, seed=0, side=8)


# --- regularizer -------------------------------------------------------------------------


def test_uniform_logits_at_epoch_zero_give_minus_ln_seven():
    arch = _arch(np.zeros((14, 7)))
    assert arch_entropy(arch).item() == pytest.approx(LN7, abs=1e-9)
    assert diversity_term(arch, 0, 1.0, 7.7).item() == pytest.approx(-LN7, abs=1e-9)


def test_one_hot_logits_give_zero_term_at_any_epoch():
    arch = _arch(_one_hot(2))
    for t in (0, 3, 40):
        assert diversity_term(arch, t, 1.0, 7.7).item() == pytest.approx(0.0, abs=1e-9)


def test_term_at_epoch_tau_is_annealed_by_one_over_e():
    arch = _arch(np.zeros((14, 7)))
    assert diversity_term(arch, 7.7, 1.0, 7.7).item() == pytest.approx(-LN7 * math.exp(-1), abs=1e-9)


def test_negative_epoch_is_rejected():
    with pytest.raises(ValueError, match="epoch index"):
        diversity_term(_arch(np.zeros((14, 7))), -1, 1.0, 7.7)


def test_descending_the_term_raises_the_entropy():
    arch = _arch(np.random.default_rng(0).standard_normal((14, 7)))
    before = arch_entropy(arch).item()
    diversity_term(arch, 0, 1.0, 7.7).backward()
    for p in arch.parameters():
        p.data = p.data - 0.5 * p.grad
    assert arch_entropy(arch).item() > before


# --- discretization ------------------------------------------------------------------------

OPS3 = ["zeroise", "bin_conv_3x3", "max_pool_3x3"]


def test_select_op_with_gamma_one_is_the_plain_argmax():
    assert select_op([0.40, 0.35, 0.25], OPS3, 1.0) == (0, pytest.approx(0.40))


def test_select_op_gamma_three_demotes_zeroise():
    # 0.40 / 3 = 0.1333 < 0.35
    idx, score = select_op([0.40, 0.35, 0.25], OPS3, 3.0)
    assert OPS3[idx] == "bin_conv_3x3"
    assert score == pytest.approx(0.35)


def test_select_op_infinite_gamma_never_picks_zeroise():
    idx, _ = select_op([0.98, 0.01, 0.01], OPS3, math.inf)
    assert OPS3[idx] != "zeroise"


def test_select_op_rejects_gamma_below_one_and_shape_mismatch():
    with pytest.raises(ValueError, match="gamma"):
        select_op([0.5, 0.5, 0.0], OPS3, 0.5)
    with pytest.raises(ValueError, match="weights"):
        select_op([0.5, 0.5], OPS3, 1.0)


def test_derive_from_zeroise_logits_depends_on_gamma():
    arch = _arch(_one_hot(6))
    assert derive_genotype(arch, 1.0).ops() == {"zeroise": 16}
    g = derive_genotype(arch, math.inf)
    # the remaining six ops tie, index order picks bin_conv_3x3; edge ties go to the lower sources
    assert g.ops() == {"bin_conv_3x3": 16}
    assert all(tuple(src for src, _ in node) == (0, 1) for node in g.normal)
    assert g.gamma == math.inf


def test_derive_keeps_the_two_strongest_incoming_edges():
    logits = np.zeros((14, 7))
    # node 5 (edges 9..13): make sources 2 and 4 the strongest, on different ops
    logits[11, 1] = 8.0
    logits[13, 4] = 6.0
    g = derive_genotype(_arch(logits), 1.0, seed=7)
    assert g.normal[3] == ((2, "bin_conv_5x5"), (4, "max_pool_3x3"))
    assert g.seed == 7


def test_learnable_fraction_extremes():
    assert learnable_fraction(_arch(_one_hot(5))) == 0.0
    assert learnable_fraction(_arch(_one_hot(3))) == 1.0
    assert learnable_fraction(_arch(_one_hot(0), _one_hot(6))) == 0.5


def test_selection_diversity_metric_averages_the_first_epochs():
    history = [EpochRecord(i, 0.0, 0.0, 0.0, v, 0.0) for i, v in enumerate([0.5] * 20 + [1.0] * 5)]
    assert selection_diversity_metric(history) == pytest.approx(0.5)
    assert selection_diversity_metric([0.2, 0.4]) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        selection_diversity_metric([])


def test_relative_increase():
    assert relative_increase(0.6, 0.4) == pytest.approx(0.5)
    assert relative_increase(0.3, 0.0) == math.inf
    assert relative_increase(0.0, 0.0) == 0.0


# --- config and steps ------------------------------------------------------------------------


@pytest.mark.parametrize(
    "overrides",
    [
        dict(gamma=0.5),
        dict(diversity_lambda=-1.0),
        dict(diversity_tau=0.0),
        dict(epochs=0),
        dict(train_fraction=1.0),
        dict(ops=("bin_conv_3x3", "identity")),
    ],
)
def test_search_config_validation(overrides):
    with pytest.raises(ValueError):
        _tiny_config(**overrides)


def test_arch_step_moves_only_the_logits_and_weight_step_only_the_weights(blobs):
    state = init_search(_tiny_config(), blobs.num_classes, blobs.side)
    batch = as_batch(blobs, np.arange(8))
    logits_before = state.arch.normal.data.copy()
    weights_before = [p.data.copy() for p in state.net.parameters()]

    search.arch_step(state, batch.images, batch.labels)
    assert not np.array_equal(state.arch.normal.data, logits_before)
    assert all(np.array_equal(a, p.data) for a, p in zip(weights_before, state.net.parameters()))

    logits_after = state.arch.normal.data.copy()
    search.weight_step(state, batch.images, batch.labels)
    np.testing.assert_array_equal(state.arch.normal.data, logits_after)
    assert any(not np.array_equal(a, p.data) for a, p in zip(weights_before, state.net.parameters()))


def test_arch_logits_are_not_network_parameters(blobs):
    state = init_search(_tiny_config(), blobs.num_classes, blobs.side)
    ids = {id(p) for p in state.net.parameters()}
    assert id(state.arch.normal) not in ids and id(state.arch.reduce) not in ids


def test_non_finite_step_becomes_diverged_with_a_snapshot(blobs, monkeypatch):
    state = init_search(_tiny_config(), blobs.num_classes, blobs.side)
    batch = as_batch(blobs, np.arange(8))

    def explode(*_):
        raise NonFiniteError("cross_entropy produced a non-finite value")

    monkeypatch.setattr(search, "arch_step", explode)
    with pytest.raises(Diverged) as info:
        search.search_step(state, batch, batch)
    assert info.value.snapshot["phase"] == "search"
    assert info.value.snapshot["epoch"] == 0


def test_run_search_records_every_epoch_and_is_deterministic(blobs):
    seen = []
    first = run_search(_tiny_config(), blobs, on_epoch=seen.append)
    second = run_search(_tiny_config(), blobs)
    assert [r.epoch for r in first.history] == [0, 1] == [r.epoch for r in seen]
    assert first.genotype == second.genotype
    assert first.history_rows() == second.history_rows()
    assert first.genotype.seed == 3
    for r in first.history:
        assert 0.0 <= r.learnable_frac <= 1.0
        assert 0.0 < r.entropy <= LN7 + 1e-6


def test_search_on_too_few_images_is_an_error():
    with pytest.raises(ValueError, match="split is empty"):
        run_search(_tiny_config(), synthetic_blobs(classes=2, n=1, side=8))


def test_default_ops_are_the_search_space():
    assert SearchConfig().layer_types == SEARCH_SPACE


@pytest.mark.slow
def test_diversity_regularizer_keeps_more_learnable_ops_early():
    data = synthetic_blobs(classes=4, n=256, seed=1, side=8)
    with_div = run_search(_tiny_config(epochs=10, diversity_lambda=1.0, arch_lr=3e-3), data)
    without = run_search(_tiny_config(epochs=10, diversity_lambda=0.0, arch_lr=3e-3), data)
    assert with_div.history[-1].entropy >= without.history[-1].entropy
