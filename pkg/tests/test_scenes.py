"""Scene sampling, observation rendering, and dataset persistence."""

from dataclasses import replace

import numpy as np
import pytest

from copeft.errors import ConfigError, DataFormatError
from copeft.scenes import (
    DOMAIN_A,
    DOMAIN_B,
    DomainConfig,
    generate_dataset,
    read_dataset,
    render_observation,
    sample_scene,
    write_dataset,
)

# small world keeps the sweeps fast
SMALL = DomainConfig(x_min=-8.0, x_max=8.0, y_min=-8.0, y_max=8.0,
                     object_rate=3.0, size_mean_w=1.5, size_std_w=0.2,
                     size_mean_l=2.5, size_std_l=0.3, sensor_range=15.0,
                     n_agents=2)


def footprint_cells(box, cfg):
    """Grid cells whose square intersects the closed box rectangle."""
    cx, cy, w, l = box
    cells = set()
    for i in range(cfg.grid_h):
        for j in range(cfg.grid_w):
            x0, x1 = cfg.x_min + j * cfg.cell_m, cfg.x_min + (j + 1) * cfg.cell_m
            y0, y1 = cfg.y_min + i * cfg.cell_m, cfg.y_min + (i + 1) * cfg.cell_m
            if x1 > cx - w / 2 and x0 <= cx + w / 2 and y1 > cy - l / 2 and y0 <= cy + l / 2:
                cells.add((i, j))
    return cells


class TestSampleScene:
    def test_zero_rate_gives_empty_scene(self):
        cfg = replace(SMALL, object_rate=0.0, clutter_rate=0.05)
        scene = sample_scene(cfg, np.random.default_rng(0))
        assert scene.boxes.shape == (0, 4)
        assert scene.grids.shape == (2, 2, cfg.grid_h, cfg.grid_w)
        # only clutter can appear
        assert scene.grids[:, 0].sum() > 0

    def test_boxes_inside_extent_and_disjoint_sweep(self):
        """Property sweep with a pairwise-overlap oracle."""
        for k in range(1000):
            scene = sample_scene(SMALL, np.random.default_rng(k))
            boxes = scene.boxes
            for cx, cy, w, l in boxes:
                assert SMALL.x_min <= cx - w / 2 and cx + w / 2 <= SMALL.x_max
                assert SMALL.y_min <= cy - l / 2 and cy + l / 2 <= SMALL.y_max
            for a in range(len(boxes)):
                for b in range(a + 1, len(boxes)):
                    ix = (min(boxes[a, 0] + boxes[a, 2] / 2, boxes[b, 0] + boxes[b, 2] / 2)
                          - max(boxes[a, 0] - boxes[a, 2] / 2, boxes[b, 0] - boxes[b, 2] / 2))
                    iy = (min(boxes[a, 1] + boxes[a, 3] / 2, boxes[b, 1] + boxes[b, 3] / 2)
                          - max(boxes[a, 1] - boxes[a, 3] / 2, boxes[b, 1] - boxes[b, 3] / 2))
                    assert ix <= 0 or iy <= 0, f"scene {k}: boxes {a},{b} overlap"

    def test_same_seed_bitwise_identical(self):
        a = sample_scene(SMALL, np.random.default_rng(7))
        b = sample_scene(SMALL, np.random.default_rng(7))
        assert np.array_equal(a.boxes, b.boxes)
        assert np.array_equal(a.agents, b.agents)
        assert np.array_equal(a.grids, b.grids)

    def test_too_dense_raises(self):
        cfg = replace(SMALL, object_rate=200.0)
        with pytest.raises(ConfigError, match="density"):
            sample_scene(cfg, np.random.default_rng(0))

    def test_ego_at_origin(self):
        scene = sample_scene(SMALL, np.random.default_rng(3))
        assert scene.agents[0].tolist() == [0.0, 0.0]


class TestRenderObservation:
    def test_box_beyond_sensor_range_invisible(self):
        cfg = replace(SMALL, clutter_rate=0.0, sensor_range=2.0, miss_slope=0.0)
        scene = sample_scene(replace(cfg, object_rate=0.0), np.random.default_rng(0))
        scene.boxes = np.array([[6.0, 6.0, 1.0, 1.0]])  # ~8.5 m from the ego
        grid = render_observation(scene, 0, cfg, np.random.default_rng(1))
        assert grid.sum() == 0.0

    def test_noise_free_points_lie_on_perimeters(self):
        cfg = replace(SMALL, noise_std=0.0, clutter_rate=0.0, miss_slope=0.0)
        for k in range(20):
            scene = sample_scene(cfg, np.random.default_rng(k))
            perimeter = set()
            for box in scene.boxes:
                perimeter |= footprint_cells(box, cfg) - interior_cells(box, cfg)
            for agent in range(cfg.n_agents):
                occupied = {(i, j) for i, j in zip(*np.nonzero(scene.grids[agent, 0]))}
                assert occupied <= perimeter, f"scene {k} agent {agent}"

    def test_counts_are_nonnegative_integers(self):
        scene = sample_scene(SMALL, np.random.default_rng(11))
        counts = scene.grids[:, 0]
        assert np.all(counts >= 0)
        assert np.array_equal(counts, np.round(counts))

    def test_ranges_normalized(self):
        scene = sample_scene(SMALL, np.random.default_rng(12))
        ranges = scene.grids[:, 1]
        assert np.all(ranges >= 0)
        assert np.all(ranges[scene.grids[:, 0] == 0] == 0)

    def test_agent_index_validated(self):
        scene = sample_scene(SMALL, np.random.default_rng(13))
        with pytest.raises(ConfigError):
            render_observation(scene, 5, SMALL, np.random.default_rng(0))


def interior_cells(box, cfg):
    """Cells fully inside the open box rectangle (no perimeter contact)."""
    cx, cy, w, l = box
    cells = set()
    for i in range(cfg.grid_h):
        for j in range(cfg.grid_w):
            x0, x1 = cfg.x_min + j * cfg.cell_m, cfg.x_min + (j + 1) * cfg.cell_m
            y0, y1 = cfg.y_min + i * cfg.cell_m, cfg.y_min + (i + 1) * cfg.cell_m
            if x0 > cx - w / 2 and x1 <= cx + w / 2 and y0 > cy - l / 2 and y1 <= cy + l / 2:
                cells.add((i, j))
    return cells


class TestShiftKnobs:
    def test_noise_monotonically_drains_footprint_mass(self):
        """More point noise means less channel-0 mass inside box footprints."""
        cfg_low = replace(SMALL, noise_std=0.05, clutter_rate=0.0)
        cfg_high = replace(SMALL, noise_std=0.5, clutter_rate=0.0)
        inside_low = inside_high = 0.0
        for k in range(500):
            a = sample_scene(cfg_low, np.random.default_rng(k))
            b = sample_scene(cfg_high, np.random.default_rng(k))
            for scene, cfg, acc in ((a, cfg_low, "low"), (b, cfg_high, "high")):
                total = 0.0
                for box in scene.boxes:
                    cells = footprint_cells(box, cfg)
                    total += sum(scene.grids[0, 0, i, j] for i, j in cells)
                if acc == "low":
                    inside_low += total
                else:
                    inside_high += total
        assert inside_high < inside_low

    def test_preset_shift_directions(self):
        assert DOMAIN_B.noise_std > DOMAIN_A.noise_std
        assert DOMAIN_B.clutter_rate > DOMAIN_A.clutter_rate
        assert DOMAIN_B.size_mean_w == pytest.approx(1.25 * DOMAIN_A.size_mean_w)
        assert DOMAIN_B.size_mean_l == pytest.approx(1.25 * DOMAIN_A.size_mean_l)
        assert DOMAIN_B.object_rate == pytest.approx(1.5 * DOMAIN_A.object_rate)


class TestDatasetPersistence:
    def test_round_trip_lossless(self, tmp_path):
        samples = generate_dataset(replace(SMALL, seed=5), 4)
        path = tmp_path / "data.jsonl"
        write_dataset(samples, replace(SMALL, seed=5), path)
        back, cfg = read_dataset(path)
        assert cfg == replace(SMALL, seed=5)
        assert len(back) == 4
        for a, b in zip(samples, back):
            assert np.array_equal(a.boxes, b.boxes)
            assert np.array_equal(a.agents, b.agents)
            assert np.array_equal(a.grids, b.grids)

    def test_bytes_pure_function_of_cfg_count_seed(self, tmp_path):
        cfg = replace(SMALL, seed=9)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_dataset(generate_dataset(cfg, 3), cfg, p1)
        write_dataset(generate_dataset(cfg, 3), cfg, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"magic":"NOPE","version":1,"cfg":{},"count":0}\n')
        with pytest.raises(DataFormatError, match="magic") as err:
            read_dataset(path)
        assert err.value.line == 1

    def test_wrong_version_rejected(self, tmp_path):
        cfg = replace(SMALL, seed=1)
        path = tmp_path / "v.jsonl"
        write_dataset(generate_dataset(cfg, 1), cfg, path)
        lines = path.read_text().splitlines()
        path.write_text(lines[0].replace('"version":1', '"version":9') + "\n" + lines[1] + "\n")
        with pytest.raises(DataFormatError, match="version"):
            read_dataset(path)

    def test_truncated_file_reports_line(self, tmp_path):
        cfg = replace(SMALL, seed=2)
        path = tmp_path / "t.jsonl"
        write_dataset(generate_dataset(cfg, 3), cfg, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:2]) + "\n")
        with pytest.raises(DataFormatError, match="truncated"):
            read_dataset(path)

    def test_malformed_frame_reports_line(self, tmp_path):
        cfg = replace(SMALL, seed=3)
        path = tmp_path / "m.jsonl"
        write_dataset(generate_dataset(cfg, 2), cfg, path)
        lines = path.read_text().splitlines()
        lines[2] = '{"boxes": [[1,2,3'
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataFormatError) as err:
            read_dataset(path)
        assert err.value.line == 3

    def test_frame_count_preserved(self, tmp_path):
        cfg = replace(SMALL, seed=4)
        path = tmp_path / "n.jsonl"
        write_dataset(generate_dataset(cfg, 7), cfg, path)
        samples, _ = read_dataset(path)
        assert len(samples) == 7


class TestDomainConfigValidation:
    def test_negative_rates_rejected(self):
        with pytest.raises(ConfigError):
            DomainConfig(clutter_rate=-0.1)

    def test_cell_must_divide_extent(self):
        with pytest.raises(ConfigError):
            DomainConfig(x_min=0.0, x_max=10.5, cell_m=1.0)

    def test_grid_dims(self):
        assert (DOMAIN_A.grid_h, DOMAIN_A.grid_w) == (64, 32)
