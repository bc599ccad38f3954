import numpy as np
import pytest
import torch

from pmslam.errors import EmptyBufferError, ShapeError
from pmslam.geometry import Pointmap
from pmslam.i2p import I2PNet
from pmslam.l2w import SceneFrame
from pmslam.nn import BlockConfig
from pmslam.retrieval import (
    BufferSet,
    RetrievalHead,
    loss_retrieval,
    periodic_buffer_update,
    reservoir_offer,
    retrieval_scores,
    top_k_scene_frames,
)

TINY = BlockConfig(d=16, heads=2, mlp_ratio=2.0, p=4, m=1, n=2, img_size=(8, 8))


def frame(i, score=1.0, feature=None):
    feat = torch.zeros(4, 16) if feature is None else feature
    return SceneFrame(i, feat, Pointmap.full(np.zeros((8, 8, 3))), np.full((8, 8), 2.0), score)


class ScriptedRng:
    def __init__(self, values):
        self.values = list(values)

    def integers(self, high):
        v = self.values.pop(0)
        assert 0 <= v < high
        return v


# --------------------------------------------------------------- reservoir


def test_first_b_offers_inserted():
    buf = BufferSet(3)
    assert all(buf.offer(frame(i)) for i in (1, 2, 3))
    assert buf.ids() == [1, 2, 3] and buf.seen == 3


def test_fourth_offer_probability_is_three_quarters():
    inserted = 0
    for draw in range(4):  # every equally likely draw for offer 4
        buf = BufferSet(3)
        for i in (1, 2, 3):
            buf.offer(frame(i))
        buf.rng = ScriptedRng([draw])
        inserted += buf.offer(frame(4))
        assert len(buf) == 3 and buf.seen == 4
    assert inserted / 4 == 0.75


def test_capacity_never_exceeded():
    buf = BufferSet(5, seed=1)
    for i in range(200):
        buf.offer(i)
        assert len(buf) <= 5 and buf.seen >= len(buf)


def test_reservoir_uniform_inclusion_small():
    from scipy.stats import chisquare

    B, n, trials = 10, 200, 2000
    counts = np.zeros(n)
    for t in range(trials):
        buf = BufferSet(B, seed=t)
        for i in range(n):
            reservoir_offer(buf, i)
        counts[buf.entries] += 1
    assert chisquare(counts).pvalue > 0.001


def test_buffer_dump():
    buf = BufferSet(4)
    for i in (3, 1):
        buf.offer(frame(i, score=2.5))
    assert buf.dump() == "1 2.5 2\n3 2.5 2\n"


# ---------------------------------------------------------- periodic update


def test_update_period_one_offers_every_keyframe():
    buf = BufferSet(10)
    for i in range(5):
        assert periodic_buffer_update(buf, [frame(i)]) == [i]
    assert buf.ids() == list(range(5))


def test_update_ties_fall_back_to_id_order():
    buf = BufferSet(10)
    inserted = periodic_buffer_update(buf, [frame(i, 1.0) for i in (7, 3, 5, 9)])
    assert inserted == [3, 5]


def test_update_matches_scripted_replay():
    rng = np.random.default_rng(42)
    cands = [frame(100 + i, float(s)) for i, s in enumerate(rng.uniform(1, 5, 20))]
    buf = BufferSet(8, seed=7)
    for i in range(30):
        buf.offer(frame(i))
    got = periodic_buffer_update(buf, cands)

    # replay by hand from a twin buffer in the same pre-update state
    twin = BufferSet(8, seed=7)
    for i in range(30):
        twin.offer(frame(i))
    entries, seen = twin.ids(), twin.seen
    ranked = sorted(cands, key=lambda f: (-f.recon_score, f.id))[:10]
    expected_inserted = []
    for f in ranked:
        seen += 1
        j = int(twin.rng.integers(seen))
        if j < 8:
            entries[j] = f.id
            expected_inserted.append(f.id)
    assert got == expected_inserted
    assert buf.ids() == entries


# ---------------------------------------------------------------- scoring


@pytest.fixture(scope="module")
def head():
    return RetrievalHead(I2PNet(TINY, seed=0).double(), r=2, seed=0).double()


def test_zero_projection_gives_half(head):
    h = RetrievalHead(head.i2p, r=1).double()
    with torch.no_grad():
        h.proj.weight.zero_()
        h.proj.bias.zero_()
    s = h(torch.randn(4, 16, dtype=torch.float64), torch.randn(3, 4, 16, dtype=torch.float64))
    assert torch.equal(s, torch.full((3,), 0.5, dtype=torch.float64))


def test_scores_in_open_interval_and_order_free(head):
    g = torch.Generator().manual_seed(0)
    frames = [frame(i, feature=torch.randn(4, 16, generator=g, dtype=torch.float64) * 3) for i in range(6)]
    key = torch.randn(4, 16, generator=g, dtype=torch.float64)
    a = dict(retrieval_scores(head, key, frames))
    b = retrieval_scores(head, key, frames[::-1])
    assert [i for i, _ in b] == [5, 4, 3, 2, 1, 0]
    assert all(a[i] == s for i, s in b)
    assert all(0 < s < 1 for s in a.values())


def test_scores_empty_buffer(head):
    with pytest.raises(EmptyBufferError):
        retrieval_scores(head, torch.zeros(4, 16), BufferSet(3))


def test_head_trains_projection_only(head):
    assert [n for n, _ in head.named_parameters()] == ["proj.weight", "proj.bias"]
    key = torch.randn(4, 16, dtype=torch.float64)
    scene = torch.randn(2, 4, 16, dtype=torch.float64)
    head.i2p.zero_grad()
    head.raw_scores(key, scene).sum().backward()
    assert head.proj.weight.grad is not None
    head.proj.zero_grad()
    head.i2p.zero_grad()


def test_head_depth_bounds():
    with pytest.raises(ValueError):
        RetrievalHead(I2PNet(TINY), r=3)


def test_head_save_load(tmp_path):
    i2p = I2PNet(TINY, seed=0)
    head = RetrievalHead(i2p, r=2, seed=5)
    head.save(tmp_path / "h.ckpt")
    back = RetrievalHead.load(tmp_path / "h.ckpt", i2p)
    assert back.r == 2 and back.i2p is i2p
    assert torch.equal(back.proj.weight, head.proj.weight)
    assert torch.equal(back.proj.bias, head.proj.bias)


# ------------------------------------------------------------------- loss


def test_loss_retrieval_midpoint():
    assert float(loss_retrieval(torch.zeros(1), torch.ones(1, 4, 4))) == 0.5


def test_loss_retrieval_zero_case():
    conf = torch.full((2, 3, 3), 4.0, dtype=torch.float64)  # C' = 0.75
    raw = torch.logit(torch.tensor([0.75, 0.75], dtype=torch.float64))
    assert float(loss_retrieval(raw, conf)) < 1e-15


def test_loss_retrieval_loop_oracle():
    rng = np.random.default_rng(0)
    raw = rng.normal(size=5)
    conf = 1 + rng.exponential(2, size=(5, 4, 6))
    expected = 0.0
    for i in range(5):
        s = 1 / (1 + np.exp(-raw[i]))
        c = sum((conf[i, a, b] - 1) / conf[i, a, b] for a in range(4) for b in range(6)) / 24
        expected += abs(s - c)
    got = float(loss_retrieval(torch.from_numpy(raw), torch.from_numpy(conf)))
    assert abs(got - expected) < 1e-12


def test_loss_retrieval_count_mismatch():
    with pytest.raises(ShapeError):
        loss_retrieval(torch.zeros(3), torch.ones(2, 4, 4))


# ------------------------------------------------------------------ top-k


def _scorer(table):
    return lambda key, entries: [(e.id, table[key][e.id]) for e in entries]


def test_top_k_clamps():
    buf = BufferSet(10)
    for i in range(3):
        buf.offer(frame(i))
    got = top_k_scene_frames(buf, ["k"], 10, _scorer({"k": {0: 0.1, 1: 0.2, 2: 0.3}}))
    assert [f.id for f in got] == [2, 1, 0]


def test_top_k_summed_over_keyframes():
    buf = BufferSet(10)
    buf.offer(frame(0))
    buf.offer(frame(1))
    table = {"k1": {0: 0.9, 1: 0.4}, "k2": {0: 0.1, 1: 0.7}}  # totals A=1.0, B=1.1
    assert [f.id for f in top_k_scene_frames(buf, ["k1", "k2"], 1, _scorer(table))] == [1]
    assert [f.id for f in top_k_scene_frames(buf, ["k2", "k1"], 1, _scorer(table))] == [1]
    assert [f.id for f in top_k_scene_frames(buf, ["k1"], 1, _scorer(table))] == [0]


def test_top_k_ties_and_exclusion():
    buf = BufferSet(10)
    for i in (4, 2, 9):
        buf.offer(frame(i))
    flat = lambda key, entries: [(e.id, 0.5) for e in entries]  # noqa: E731
    assert [f.id for f in top_k_scene_frames(buf, ["k"], 2, flat)] == [2, 4]
    assert [f.id for f in top_k_scene_frames(buf, ["k"], 2, flat, exclude={2})] == [4, 9]
    with pytest.raises(EmptyBufferError):
        top_k_scene_frames(BufferSet(2), ["k"], 1, flat)
