"""Vertex posterior, correspondence loss, geodesics, and the mesh format."""

import math

import numpy as np
import pytest

from densedet.surface_embedding import (
    CorrespondenceSample,
    EmbeddingMatrix,
    Mesh,
    PixelEmbeddingField,
    cse_loss,
    expected_geodesic_error,
    format_mesh,
    geodesic_distances,
    parse_mesh,
    unit_circle_mesh,
    vertex_posterior,
)


def naive_posterior(table, q):
    """Unstabilized softmax over negative squared distances."""
    scores = np.array([-float(((row - q) ** 2).sum()) for row in table])
    exp = np.exp(scores)
    return exp / exp.sum()


def bellman_ford(n_vertices, edges, source):
    dist = [math.inf] * n_vertices
    dist[source] = 0.0
    for _ in range(n_vertices - 1):
        changed = False
        for i, j, length in edges:
            if dist[i] + length < dist[j]:
                dist[j] = dist[i] + length
                changed = True
            if dist[j] + length < dist[i]:
                dist[i] = dist[j] + length
                changed = True
        if not changed:
            break
    return dist


def random_connected_mesh(rng, n):
    """Random spanning tree plus extra chords, all lengths positive."""
    edges = []
    for v in range(1, n):
        u = int(rng.integers(0, v))
        edges.append((u, v, float(rng.uniform(0.1, 2.0))))
    for _ in range(int(rng.integers(0, n))):
        u, v = rng.integers(0, n, 2)
        if u != v:
            edges.append((int(u), int(v), float(rng.uniform(0.1, 2.0))))
    return Mesh(positions=rng.normal(size=(n, 2)), edges=edges)


class TestVertexPosterior:
    def test_equal_rows_give_uniform(self):
        table = EmbeddingMatrix(np.tile([0.3, -0.2, 0.5], (6, 1)))
        p = vertex_posterior(table, np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(p, 1.0 / 6.0, atol=1e-12)

    def test_two_vertex_closed_form(self):
        rng = np.random.default_rng(91)
        for _ in range(20):
            q = rng.normal(size=4)
            offset = rng.normal(size=4)
            d2 = float((offset**2).sum())
            table = EmbeddingMatrix(np.stack([q, q + offset]))
            p = vertex_posterior(table, q)
            assert p[0] == pytest.approx(1.0 / (1.0 + math.exp(-d2)), abs=1e-12)

    def test_matches_naive_formula(self):
        rng = np.random.default_rng(92)
        for _ in range(300):
            v = int(rng.integers(2, 20))
            d = int(rng.integers(1, 8))
            table = rng.normal(0, 0.5, (v, d))
            q = rng.normal(0, 0.5, d)
            got = vertex_posterior(EmbeddingMatrix(table), q)
            np.testing.assert_allclose(got, naive_posterior(table, q), atol=1e-9)
            assert abs(got.sum() - 1.0) < 1e-9
            assert (got >= 0).all()

    def test_shift_invariance(self):
        rng = np.random.default_rng(93)
        for _ in range(50):
            table = rng.normal(size=(8, 3))
            q = rng.normal(size=3)
            shift = rng.normal(size=3)
            a = vertex_posterior(EmbeddingMatrix(table), q)
            b = vertex_posterior(EmbeddingMatrix(table + shift), q + shift)
            np.testing.assert_allclose(a, b, atol=1e-9)

    def test_argmax_is_nearest_row(self):
        rng = np.random.default_rng(94)
        for _ in range(50):
            table = rng.normal(size=(10, 4))
            q = rng.normal(size=4)
            p = vertex_posterior(EmbeddingMatrix(table), q)
            nearest = int(np.argmin(((table - q) ** 2).sum(axis=1)))
            assert int(np.argmax(p)) == nearest

    def test_dot_score_variant(self):
        rng = np.random.default_rng(95)
        table = rng.normal(size=(6, 3))
        q = rng.normal(size=3)
        p = vertex_posterior(EmbeddingMatrix(table), q, score="dot")
        scores = table @ q
        want = np.exp(scores - scores.max())
        np.testing.assert_allclose(p, want / want.sum(), atol=1e-12)

    def test_large_scores_stay_finite(self):
        table = EmbeddingMatrix(np.array([[1000.0], [-1000.0]]))
        p = vertex_posterior(table, np.array([1000.0]))
        assert np.isfinite(p).all()
        assert p[0] == pytest.approx(1.0)

    def test_bad_inputs(self):
        table = EmbeddingMatrix(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            vertex_posterior(table, np.zeros(5))
        with pytest.raises(ValueError):
            vertex_posterior(table, np.array([np.nan, 0.0]))
        with pytest.raises(ValueError):
            vertex_posterior(table, np.zeros(2), score="cosine")


class TestCseLoss:
    def test_equal_rows_loss_is_log_v(self):
        rng = np.random.default_rng(101)
        for v in (2, 7, 64):
            table = EmbeddingMatrix(np.tile(rng.normal(size=3), (v, 1)))
            field = rng.normal(size=(3, 2, 2))
            samples = [CorrespondenceSample(0, 0, v - 1), CorrespondenceSample(1, 1, 0)]
            loss, _, _ = cse_loss(table, field, samples)
            assert loss == pytest.approx(math.log(v), abs=1e-12)

    def test_concentrated_posterior_loss_vanishes(self):
        # gt row sits on the pixel embedding, all others far away
        q = np.array([0.0, 0.0])
        rows = np.vstack([q, [50.0, 50.0], [-50.0, 40.0]])
        field = np.zeros((2, 1, 1))
        loss, _, _ = cse_loss(EmbeddingMatrix(rows), field, [CorrespondenceSample(0, 0, 0)])
        assert 0.0 <= loss < 1e-10

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(102)
        for _ in range(50):
            table = EmbeddingMatrix(rng.normal(size=(6, 3)))
            field = rng.normal(size=(3, 3, 3))
            samples = [
                CorrespondenceSample(int(rng.integers(3)), int(rng.integers(3)), int(rng.integers(6)))
                for _ in range(5)
            ]
            loss, _, _ = cse_loss(table, field, samples)
            assert loss >= 0.0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(103)
        v, d, p = 5, 3, 2
        for _ in range(20):
            table = rng.normal(0, 0.5, (v, d))
            field = rng.normal(0, 0.5, (d, p, p))
            samples = [
                CorrespondenceSample(int(rng.integers(p)), int(rng.integers(p)), int(rng.integers(v)))
                for _ in range(4)
            ]
            _, g_tab, g_fld = cse_loss(EmbeddingMatrix(table), field, samples)
            eps = 1e-4

            def loss_at(tab, fld):
                return cse_loss(EmbeddingMatrix(tab), fld, samples)[0]

            for idx in np.ndindex(table.shape):
                plus = table.copy(); plus[idx] += eps
                minus = table.copy(); minus[idx] -= eps
                fd = (loss_at(plus, field) - loss_at(minus, field)) / (2 * eps)
                assert abs(fd - g_tab[idx]) / max(1e-12, abs(fd) + abs(g_tab[idx])) < 1e-5
            for idx in np.ndindex(field.shape):
                plus = field.copy(); plus[idx] += eps
                minus = field.copy(); minus[idx] -= eps
                fd = (loss_at(table, plus) - loss_at(table, minus)) / (2 * eps)
                assert abs(fd - g_fld[idx]) / max(1e-12, abs(fd) + abs(g_fld[idx])) < 1e-5

    def test_rejects_bad_samples(self):
        table = EmbeddingMatrix(np.zeros((3, 2)))
        field = np.zeros((2, 2, 2))
        with pytest.raises(ValueError):
            cse_loss(table, field, [])
        with pytest.raises(ValueError):
            cse_loss(table, field, [CorrespondenceSample(0, 0, 3)])
        with pytest.raises(ValueError):
            cse_loss(table, field, [CorrespondenceSample(5, 0, 1)])

    def test_accepts_field_wrapper(self):
        table = EmbeddingMatrix(np.zeros((3, 2)))
        field = PixelEmbeddingField(np.zeros((2, 2, 2)))
        loss, _, _ = cse_loss(table, field, [CorrespondenceSample(0, 0, 1)])
        assert loss == pytest.approx(math.log(3))


class TestGeodesics:
    def test_path_graph(self):
        mesh = Mesh(positions=np.zeros((3, 2)), edges=[(0, 1, 1.0), (1, 2, 1.0)])
        np.testing.assert_allclose(geodesic_distances(mesh, 0), [0.0, 1.0, 2.0])

    def test_source_distance_zero(self):
        rng = np.random.default_rng(111)
        mesh = random_connected_mesh(rng, 20)
        for src in (0, 7, 19):
            assert geodesic_distances(mesh, src)[src] == 0.0

    def test_matches_bellman_ford(self):
        rng = np.random.default_rng(112)
        for _ in range(30):
            n = int(rng.integers(2, 50))
            mesh = random_connected_mesh(rng, n)
            src = int(rng.integers(0, n))
            got = geodesic_distances(mesh, src)
            want = bellman_ford(n, mesh.edges, src)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_triangle_inequality(self):
        rng = np.random.default_rng(113)
        mesh = random_connected_mesh(rng, 25)
        dist = np.stack([geodesic_distances(mesh, s) for s in range(25)])
        for _ in range(200):
            a, b, c = rng.integers(0, 25, 3)
            assert dist[a, b] <= dist[a, c] + dist[c, b] + 1e-12

    def test_disconnected_rejected_at_construction(self):
        with pytest.raises(ValueError):
            Mesh(positions=np.zeros((4, 2)), edges=[(0, 1, 1.0), (2, 3, 1.0)])

    def test_self_loop_rejected(self):
        with pytest.raises(ValueError):
            Mesh(positions=np.zeros((2, 2)), edges=[(0, 0, 1.0), (0, 1, 1.0)])

    def test_nonpositive_length_rejected(self):
        with pytest.raises(ValueError):
            Mesh(positions=np.zeros((2, 2)), edges=[(0, 1, 0.0)])


class TestExpectedGeodesicError:
    def test_one_hot_gives_zero(self):
        mesh = unit_circle_mesh(12)
        p = np.zeros(12)
        p[4] = 1.0
        assert expected_geodesic_error(p, 4, mesh) == 0.0

    def test_uniform_on_path_graph(self):
        mesh = Mesh(positions=np.zeros((3, 2)), edges=[(0, 1, 1.0), (1, 2, 1.0)])
        assert expected_geodesic_error(np.ones(3) / 3, 0, mesh) == pytest.approx(1.0)

    def test_nonnegative(self):
        rng = np.random.default_rng(121)
        mesh = unit_circle_mesh(16)
        for _ in range(30):
            p = rng.dirichlet(np.ones(16))
            assert expected_geodesic_error(p, int(rng.integers(16)), mesh) >= 0.0

    def test_rejects_unnormalized(self):
        mesh = unit_circle_mesh(8)
        with pytest.raises(ValueError):
            expected_geodesic_error(np.full(8, 0.2), 0, mesh)


class TestEmbeddingMatrix:
    def test_seeded_initialization(self):
        a = EmbeddingMatrix.initialize(10, 4, seed=3)
        b = EmbeddingMatrix.initialize(10, 4, seed=3)
        np.testing.assert_array_equal(a.values, b.values)
        assert (np.abs(a.values) <= 0.1).all()
        assert a.values.shape == (10, 4)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            EmbeddingMatrix(np.array([[np.inf, 0.0]]))


class TestMeshFormat:
    def test_roundtrip(self):
        mesh = unit_circle_mesh(9)
        back = parse_mesh(format_mesh(mesh))
        np.testing.assert_array_equal(back.positions, mesh.positions)
        assert back.edges == mesh.edges

    def test_parse_simple_document(self):
        text = "mesh 3 2\n0 0\n1 0\n2 0\n0 1 1.0\n1 2 1.5\n"
        mesh = parse_mesh(text)
        assert mesh.vertex_count == 3
        assert mesh.edges == [(0, 1, 1.0), (1, 2, 1.5)]

    def test_rejects_malformed_counts(self):
        with pytest.raises(ValueError):
            parse_mesh("mesh 3 2\n0 0\n1 0\n2 0\n0 1 1.0\n")
        with pytest.raises(ValueError):
            parse_mesh("grid 3 2\n")
        with pytest.raises(ValueError):
            parse_mesh("")
        with pytest.raises(ValueError):
            parse_mesh("mesh two 1\n0 0\n1 1\n0 1 1\n")

    def test_unit_circle_geometry(self):
        mesh = unit_circle_mesh(64)
        assert mesh.vertex_count == 64
        radii = np.linalg.norm(mesh.positions, axis=1)
        np.testing.assert_allclose(radii, 1.0, atol=1e-12)
        assert len(mesh.edges) == 64
