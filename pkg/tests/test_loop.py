from types import SimpleNamespace

import numpy as np
import pytest

from thermoslam import features, geom, loop, odom, posegraph, synth
from thermoslam.geom import Pose
from thermoslam.imgproc import rescale_to_8bit


@pytest.fixture(scope="module")
def corridor():
    cfg = synth.SceneConfig(preset="corridor-loop", frames=40)
    return cfg, synth.make_preset(cfg)


def image8(cfg, pr, i):
    return rescale_to_8bit(synth.render_thermal(pr.scene, pr.trajectory.poses[i], cfg.intrinsics(), timestamp=i))


def frame(cfg, pr, i, kf_id=None):
    K, E = cfg.intrinsics(), pr.extrinsic
    T = pr.trajectory.poses[i]
    img = synth.render_thermal(pr.scene, T, K, timestamp=i)
    cloud = synth.render_lidar(pr.scene, T @ E.inverse())
    f = odom.Frame.build(img, E.inverse().apply(cloud), K, pose=T)
    return f if kf_id is None else odom.make_keyframe(f, kf_id)


@pytest.fixture(scope="module")
def vocabulary(corridor):
    cfg, pr = corridor
    sets = [features.extract_orb(image8(cfg, pr, i))[1] for i in range(0, 40, 4)]
    return features.Vocabulary.train(sets, k=6, depth=3, seed=0)


# -- features -----------------------------------------------------------------


def test_constant_image_has_no_usable_bag(vocabulary):
    bag = features.extract_features(np.full((256, 320), 128, np.uint8), vocabulary)
    assert len(bag.descriptors) < features.MIN_FEATURES
    assert not bag.usable


def test_orb_rotation_matches(corridor):
    cfg, pr = corridor
    img = image8(cfg, pr, 5)
    kp, d = features.extract_orb(img)
    kp2, d2 = features.extract_orb(np.ascontiguousarray(np.rot90(img)))
    m = features.match_descriptors(d, d2)
    assert len(m) >= 0.6 * min(len(kp), len(kp2))
    w = img.shape[1]
    pred = np.stack([kp[m[:, 0], 1], w - 1 - kp[m[:, 0], 0]], axis=1)
    assert np.mean(np.linalg.norm(pred - kp2[m[:, 1]], axis=1) < 3.0) > 0.9


def test_orb_capped(corridor):
    cfg, pr = corridor
    kp, d = features.extract_orb(image8(cfg, pr, 3), features.ORBParams(max_features=50))
    assert len(kp) <= 50 and d.shape == (len(kp), 32) and d.dtype == np.uint8


def test_same_image_similarity_one(corridor, vocabulary):
    cfg, pr = corridor
    bag = features.extract_features(image8(cfg, pr, 7), vocabulary)
    assert bag.usable
    assert features.similarity(bag.vector, bag.vector) == pytest.approx(1.0)
    assert features.common_word_ratio(bag, bag) == 1.0


def test_similarity_examples():
    assert features.similarity({1: 0.5, 2: 0.5}, {1: 0.5, 2: 0.5}) == pytest.approx(1.0)
    assert features.similarity({1: 1.0}, {2: 1.0}) == pytest.approx(0.0)
    assert features.similarity({1: 0.5, 2: 0.5}, {1: 0.5, 3: 0.5}) == pytest.approx(0.5)
    assert features.similarity({}, {1: 1.0}) == 0.0


def test_similarity_symmetric_and_bounded(rng):
    for _ in range(50):
        a = {int(k): float(v) for k, v in zip(rng.choice(30, 8, replace=False), rng.random(8))}
        b = {int(k): float(v) for k, v in zip(rng.choice(30, 8, replace=False), rng.random(8))}
        s = features.similarity(a, b)
        assert 0.0 <= s <= 1.0
        assert s == pytest.approx(features.similarity(b, a), abs=1e-15)


def test_vocabulary_round_trip(tmp_path, corridor, vocabulary):
    cfg, pr = corridor
    path = tmp_path / "voc.bin"
    vocabulary.save(path)
    back = features.Vocabulary.load(path)
    np.testing.assert_array_equal(back.parent, vocabulary.parent)
    np.testing.assert_array_equal(back.centers, vocabulary.centers)
    np.testing.assert_array_equal(back.idf, vocabulary.idf)
    d = features.extract_orb(image8(cfg, pr, 11))[1]
    np.testing.assert_array_equal(back.quantize(d), vocabulary.quantize(d))


def test_vocabulary_rejects_bad_files(tmp_path, vocabulary):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTAVOCAB" + bytes(40))
    with pytest.raises(ValueError, match="byte 0"):
        features.Vocabulary.load(bad)
    good = tmp_path / "voc.bin"
    vocabulary.save(good)
    bad.write_bytes(good.read_bytes()[:-9])
    with pytest.raises(ValueError, match="truncated"):
        features.Vocabulary.load(bad)


def test_vocabulary_training_deterministic(corridor):
    cfg, pr = corridor
    sets = [features.extract_orb(image8(cfg, pr, i))[1] for i in (0, 10, 20)]
    a = features.Vocabulary.train(sets, k=4, depth=3, seed=3)
    b = features.Vocabulary.train(sets, k=4, depth=3, seed=3)
    np.testing.assert_array_equal(a.centers, b.centers)
    with pytest.raises(ValueError):
        features.Vocabulary.train([np.zeros((0, 32), np.uint8)])


# -- detection ----------------------------------------------------------------


def stub(kf_id, t_sec, bag):
    return SimpleNamespace(id=kf_id, timestamp=int(t_sec * 1e9), bag=bag)


def test_detect_empty_database(corridor, vocabulary):
    cfg, pr = corridor
    q = stub(0, 100.0, features.extract_features(image8(cfg, pr, 0), vocabulary))
    assert loop.detect_loop(q, []) is None


def test_detect_exact_revisit(corridor, vocabulary):
    cfg, pr = corridor
    bags = [features.extract_features(image8(cfg, pr, i), vocabulary) for i in (0, 12, 24, 30, 36)]
    db = [stub(k, t, b) for k, (t, b) in enumerate(zip([0.0, 5.0, 10.0, 90.0, 95.0], bags))]
    # the query sees exactly what keyframe 1 saw
    q = stub(9, 100.0, bags[1])
    cand = loop.detect_loop(q, db)
    assert cand is not None and cand.keyframe.id == 1
    assert cand.eta >= 1.0
    assert cand.common_ratio == 1.0


def test_detect_needs_recent_normalizer(corridor, vocabulary):
    cfg, pr = corridor
    b = features.extract_features(image8(cfg, pr, 0), vocabulary)
    assert loop.detect_loop(stub(9, 100.0, b), [stub(0, 0.0, b)]) is None


# -- alignment and gate -------------------------------------------------------


def test_align_identity(corridor):
    cfg, pr = corridor
    kf = frame(cfg, pr, 6, kf_id=0)
    res = loop.align_affine(kf, kf.pyramid, Pose())
    assert np.linalg.norm(geom.log(res.pose)) < 1e-6
    assert res.a == pytest.approx(1.0, abs=1e-6) and res.b == pytest.approx(0.0, abs=1e-3)


def test_align_recovers_offset(corridor):
    cfg, pr = corridor
    kf = frame(cfg, pr, 6, kf_id=0)
    res = loop.align_affine(kf, [p + 300.0 for p in kf.pyramid], Pose())
    # a * (I + 300) + b = I  =>  b = -300
    assert res.a == pytest.approx(1.0, abs=1e-3)
    assert res.b == pytest.approx(-300.0, abs=2.0)
    assert np.linalg.norm(geom.log(res.pose)) < 1e-4


def test_align_without_affine_matches_plain_tracking(corridor):
    cfg, pr = corridor
    f0, f1 = frame(cfg, pr, 6, kf_id=0), frame(cfg, pr, 7)
    params = loop.LoopParams()
    res = loop.align_affine(f0, f1.pyramid, Pose(), params, estimate_affine=False)
    X, _ = odom.track(f0, f1.pyramid, Pose(), odom.TrackParams(max_iterations=params.max_rounds))
    assert (res.a, res.b) == (1.0, 0.0)
    assert res.pose.allclose(X, atol=1e-12)


def test_align_textureless_fails(corridor):
    cfg, pr = corridor
    kf = frame(cfg, pr, 6, kf_id=0)
    with pytest.raises(loop.AlignmentFailed):
        loop.align_affine(kf, [np.full_like(p, 5000.0) for p in kf.pyramid], Pose())


def test_cross_validate_examples(rng):
    T = geom.exp(rng.normal(0, 0.3, 6))
    assert loop.cross_validate(T, T.inverse())
    assert loop.consistency(T, T.inverse()) < 1e-9
    off = Pose(np.eye(3), [1.0, 0.0, 0.0])
    assert not loop.cross_validate(T, off @ T.inverse())


def test_cross_validate_threshold_sweep():
    T = geom.exp([0.1, 0.2, -0.1, 0.5, 0.3, 1.0])
    for s in np.linspace(0.0, 0.1, 41):
        if abs(s - 0.05) < 1e-9:
            continue  # the boundary itself is decided by round-off
        E = geom.exp([0.0, 0.0, 0.0, s, 0.0, 0.0])
        assert loop.cross_validate(T, E @ T.inverse()) == (s < 0.05)


def test_verify_loop_accepts_revisit(corridor):
    cfg, pr = corridor
    a, b = frame(cfg, pr, 6, kf_id=0), frame(cfg, pr, 7, kf_id=5)
    cand = loop.LoopCandidate(a, 1.0, 0.5, 1.0)
    ev = loop.verify_loop(b, cand)
    assert ev.accepted and ev.consistency < 0.05
    truth = geom.relative(b.pose, a.pose)  # kf points -> current frame
    assert ev.relative.allclose(truth, atol=5e-3)


# -- pose graph ---------------------------------------------------------------


def chain(n, step):
    g = posegraph.PoseGraph()
    T = Pose()
    g.add_node(T)
    for i in range(1, n):
        T = T @ step
        g.add_node(T)
        g.add_edge(i - 1, i, step)
    return g


def test_consistent_chain_unchanged():
    step = geom.exp([0.0, 0.05, 0.0, 0.0, 0.0, 1.0])
    g = chain(10, step)
    res = posegraph.optimize_pose_graph(g)
    assert res.iterations == 0
    for a, b in zip(res.poses, g.nodes):
        assert a.allclose(b, atol=1e-12)


def square(drift_deg=2.0):
    true_step = Pose(geom.exp([0, np.pi / 2, 0, 0, 0, 0]).R, [0.0, 0.0, 4.0])
    meas = true_step @ geom.exp([0, np.radians(drift_deg), 0, 0, 0, 0])
    g = chain(5, meas)
    return g, true_step


def test_square_loop_closes():
    g, true_step = square()
    gap0 = np.linalg.norm(g.nodes[4].t - g.nodes[0].t)
    g.add_edge(0, 4, Pose(), information=100.0, kind="loop")
    res = posegraph.optimize_pose_graph(g)
    assert res.converged and res.final_error < res.initial_error
    gap = np.linalg.norm(res.poses[4].t - res.poses[0].t)
    assert gap < 0.1 * gap0
    assert res.poses[0].allclose(g.nodes[0])


def test_duplicate_edge_same_optimum():
    g1, _ = square()
    g1.add_edge(0, 4, Pose(), information=100.0, kind="loop")
    g2, _ = square()
    g2.add_edge(0, 4, Pose(), information=50.0, kind="loop")
    g2.add_edge(0, 4, Pose(), information=50.0, kind="loop")
    r1 = posegraph.optimize_pose_graph(g1)
    r2 = posegraph.optimize_pose_graph(g2)
    for a, b in zip(r1.poses, r2.poses):
        assert a.allclose(b, atol=1e-6)


def test_edge_validation():
    g = chain(2, Pose())
    with pytest.raises(IndexError):
        g.add_edge(0, 5, Pose())
    with pytest.raises(ValueError):
        g.add_edge(0, 1, Pose(np.eye(3), [np.nan, 0, 0]))
