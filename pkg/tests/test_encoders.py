import math

import numpy as np
import pytest

from motionmix.encoders import (Segment, _diff_features, encode_history,
                                encode_interactions, encode_road, encode_scene,
                                init_encoder_params, road_segment_features,
                                select_closest_segments, split_polyline,
                                track_step_features)
from motionmix.errors import DimensionError, DomainError
from motionmix.params import ParamBundle
from motionmix.scene import ROAD_TYPES, Polyline, Scenario, to_agent_frame
from test_scene import make_track, two_agent_scenario


def small_encoder(rng, history_steps=2, **over):
    bundle = ParamBundle()
    kw = dict(prefix="enc.", history_steps=history_steps, dt=0.2, lstm_hidden=6,
              mcg_width=6, mcg_depth=2, cg_hidden_layers=1, pooling="max",
              max_road_segments=4, max_segment_length=5.0)
    kw.update(over)
    enc = init_encoder_params(bundle, rng, **kw)
    return bundle, enc


class TestSegments:
    def test_split_respects_max_length(self):
        pl = Polyline("lane_center", [[0, 0], [12, 0]])
        segs = split_polyline(pl, 0, 5.0)
        assert len(segs) == 3
        for s in segs:
            assert np.linalg.norm(s.b - s.a) <= 5.0 + 1e-12
        np.testing.assert_allclose(segs[0].a, [0, 0])
        np.testing.assert_allclose(segs[-1].b, [12, 0])

    def test_split_continuous(self):
        pl = Polyline("road_edge", [[0, 0], [7, 0], [7, 9]])
        segs = split_polyline(pl, 0, 4.0)
        for s1, s2 in zip(segs, segs[1:]):
            np.testing.assert_allclose(s1.b, s2.a, atol=1e-12)

    def test_zero_length_edges_dropped(self):
        pl = Polyline("road_edge", [[0, 0], [0, 0], [3, 0]])
        segs = split_polyline(pl, 0, 5.0)
        assert len(segs) == 1

    def test_vertex_tangent_carries_curvature(self):
        # right-angle corner: the corner vertex tangent is the average direction
        pl = Polyline("lane_center", [[0, 0], [4, 0], [4, 4]])
        segs = split_polyline(pl, 0, 10.0)
        np.testing.assert_allclose(segs[1].a_tangent,
                                   [math.sqrt(0.5), math.sqrt(0.5)], atol=1e-12)

    def test_select_orders_by_distance(self):
        road = (Polyline("lane_center", [[10, 0], [14, 0]]),
                Polyline("lane_center", [[2, 0], [6, 0]]))
        segs = select_closest_segments(road, 4, 100.0)
        assert segs[0].poly_index == 1
        dists = [s.distance for s in segs]
        assert dists == sorted(dists)

    def test_select_truncates(self):
        road = (Polyline("lane_center", [[0, 1], [40, 1]]),)
        segs = select_closest_segments(road, 3, 5.0)
        assert len(segs) == 3

    def test_feature_vector_dim_21(self):
        seg = Segment(np.array([1.0, 2.0]), np.array([4.0, 2.0]), "lane_center",
                      np.array([1.0, 0.0]), 0, 0, 2.0)
        vec = road_segment_features(seg).to_vector()
        assert vec.shape == (9 + len(ROAD_TYPES),) == (21,)

    def test_feature_geometry(self):
        # segment x in [3, 7] at y=4: closest point (3, 4)
        seg = Segment(np.array([3.0, 4.0]), np.array([7.0, 4.0]), "road_edge",
                      np.array([1.0, 0.0]), 0, 0, 5.0)
        f = road_segment_features(seg)
        assert f.r_norm == pytest.approx(5.0)
        np.testing.assert_allclose(f.r_unit, [0.6, 0.8])
        np.testing.assert_allclose(f.seg_dir, [1.0, 0.0])
        assert f.seg_len == pytest.approx(4.0)
        assert f.b_minus_r_norm == pytest.approx(4.0)
        assert f.type_onehot[ROAD_TYPES.index("road_edge")] == 1.0

    def test_onsegment_origin_unit_zeroed(self):
        seg = Segment(np.array([-1.0, 0.0]), np.array([2.0, 0.0]), "lane_center",
                      np.array([1.0, 0.0]), 0, 0, 0.0)
        f = road_segment_features(seg)
        assert f.r_norm == pytest.approx(0.0)
        np.testing.assert_array_equal(f.r_unit, [0.0, 0.0])


class TestTrackFeatures:
    def test_invalid_rows_zeroed(self):
        tr = make_track("a", np.ones((4, 2)) * 3, valid=[1, 0, 1, 1])
        f = track_step_features(tr, [0, 1, 2])
        assert f[1].sum() == 0.0
        assert f[0, -1] == 1.0 and f[2, -1] == 1.0

    def test_diff_needs_both_valid(self):
        tr = make_track("a", np.arange(8.0).reshape(4, 2), valid=[1, 0, 1, 1])
        f = track_step_features(tr, [0, 1, 2, 3])
        d = _diff_features(f)
        assert d[0, -1] == 0.0 and d[1, -1] == 0.0 and d[2, -1] == 1.0
        np.testing.assert_allclose(d[2, :2], [2.0, 2.0])


class TestEncoders:
    def test_embedding_widths(self, rng):
        bundle, enc = small_encoder(rng)
        s = to_agent_frame(two_agent_scenario(), "a")
        state = encode_history(s.track("a"), enc)
        assert state.width == enc.state_width
        inter = encode_interactions(s, "a", enc, state)
        road = encode_road(s, enc, state)
        assert inter.width == road.width == 6
        combined = encode_scene(s, "a", enc)
        assert combined.width == enc.combined_width

    def test_deterministic(self, rng):
        bundle, enc = small_encoder(rng)
        s = to_agent_frame(two_agent_scenario(), "a")
        a = encode_scene(s, "a", enc).values.data
        b = encode_scene(s, "a", enc).values.data
        np.testing.assert_array_equal(a, b)

    def test_no_neighbors_uses_null_element(self, rng):
        bundle, enc = small_encoder(rng)
        s = two_agent_scenario()
        solo = Scenario(tracks=(s.tracks[0],), road=s.road, av_id="a",
                        target_ids=("a",), history_steps=2, future_steps=3, dt=0.2)
        state = encode_history(solo.track("a"), enc)
        emb = encode_interactions(solo, "a", enc, state)
        assert np.all(np.isfinite(emb.values.data))

    def test_no_road_uses_null_element(self, rng):
        bundle, enc = small_encoder(rng)
        s = two_agent_scenario()
        bare = Scenario(tracks=s.tracks, road=(), av_id="b", target_ids=("a",),
                        history_steps=2, future_steps=3, dt=0.2)
        state = encode_history(bare.track("a"), enc)
        emb = encode_road(bare, enc, state)
        assert np.all(np.isfinite(emb.values.data))

    def test_far_road_ignored_by_selection(self, rng):
        """Adding a polyline beyond the P nearest segments cannot change the
        road embedding."""
        bundle, enc = small_encoder(rng, max_road_segments=2)
        s = to_agent_frame(two_agent_scenario(), "a")
        state = encode_history(s.track("a"), enc)
        near = encode_road(s, enc, state)
        far = Polyline("road_edge", [[500.0, 500.0], [505.0, 500.0]])
        s2 = Scenario(tracks=s.tracks, road=s.road + (far,), av_id=s.av_id,
                      target_ids=s.target_ids, history_steps=2, future_steps=3,
                      dt=0.2)
        again = encode_road(s2, enc, state)
        np.testing.assert_array_equal(near.values.data, again.values.data)

    def test_combine_checks_kinds(self, rng):
        bundle, enc = small_encoder(rng)
        s = to_agent_frame(two_agent_scenario(), "a")
        state = encode_history(s.track("a"), enc)
        road = encode_road(s, enc, state)
        from motionmix.encoders import combine
        with pytest.raises(DimensionError):
            combine(state, road, road)
