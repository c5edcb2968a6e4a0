import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import pearsonr
from sklearn.metrics import accuracy_score, f1_score, matthews_corrcoef

from slash import heads as H
from slash import tensor as T
from slash.heads import ClassifierHead, TaskKind
from slash.tensor import Tensor

labels_strategy = st.lists(st.integers(0, 3), min_size=2, max_size=60)


class TestHead:
    def test_initialize_is_seeded(self):
        a = ClassifierHead.initialize(3, 8, seed=2)
        assert a.weight.shape == (3, 8) and not a.bias.data.any()
        np.testing.assert_array_equal(a.weight.data, ClassifierHead.initialize(3, 8, seed=2).weight.data)
        assert a.n_params == 27

    def test_shapes_validated(self):
        with pytest.raises(ValueError):
            ClassifierHead(Tensor(np.zeros((3, 4))), Tensor(np.zeros(2)))
        with pytest.raises(ValueError):
            ClassifierHead(Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)), TaskKind.REGRESS)

    def test_predict_affine(self, rng):
        head = ClassifierHead(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=3)))
        x = rng.normal(size=(5, 4))
        np.testing.assert_allclose(H.predict(head, Tensor(x)).data, x @ head.weight.data.T + head.bias.data,
                                   rtol=1e-6)
        np.testing.assert_allclose(H.predict(head, Tensor(x[0])).data, H.predict(head, Tensor(x)).data[0], rtol=1e-6)
        assert H.predict(head, Tensor(rng.normal(size=(2, 6, 4)))).shape == (2, 6, 3)

    def test_predict_checks_width(self):
        with pytest.raises(ValueError):
            H.predict(ClassifierHead.initialize(2, 4, 0), Tensor(np.zeros((1, 5))))

    def test_head_gradient(self, f64, rng):
        head = ClassifierHead(Tensor(rng.normal(size=(2, 3)), requires_grad=True),
                              Tensor(np.zeros(2), requires_grad=True))
        x = rng.normal(size=(4, 3))
        T.backward(T.sum(H.predict(head, Tensor(x))))
        np.testing.assert_allclose(head.weight.grad, np.tile(x.sum(0), (2, 1)))
        np.testing.assert_allclose(head.bias.grad, [4.0, 4.0])


class TestMetricsAgainstSklearn:
    @pytest.mark.filterwarnings("ignore:A single label was found")
    @settings(max_examples=60, deadline=None)
    @given(data=st.data())
    def test_random_labelings(self, data):
        y = data.draw(labels_strategy)
        p = data.draw(st.lists(st.integers(0, 3), min_size=len(y), max_size=len(y)))
        assert H.accuracy(p, y) == pytest.approx(accuracy_score(y, p))
        assert H.matthews(p, y) == pytest.approx(matthews_corrcoef(y, p), abs=1e-12)
        assert H.f1_micro(p, y) == pytest.approx(f1_score(y, p, average="micro"))
        yb, pb = [v % 2 for v in y], [v % 2 for v in p]
        assert H.f1_binary(pb, yb) == pytest.approx(f1_score(yb, pb, zero_division=0))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=3, max_size=40))
    def test_pearson(self, pairs):
        p, y = np.array(pairs).T
        if np.ptp(p) < 1e-6 or np.ptp(y) < 1e-6:
            return
        assert H.pearson(p, y) == pytest.approx(pearsonr(p, y)[0], abs=1e-9)

    def test_f1_micro_with_ignored_class(self):
        y, p = [0, 1, 2, 2, 0], [0, 2, 2, 1, 1]
        assert H.f1_micro(p, y, ignore=(0,)) == pytest.approx(f1_score(y, p, labels=[1, 2], average="micro"))


class TestHandCases:
    def test_four_sample_case(self):
        # predictions [1,1,0,0] against gold [1,0,1,0]: one hit per class.
        p, y = [1, 1, 0, 0], [1, 0, 1, 0]
        assert H.matthews(p, y) == 0.0
        assert H.f1_binary(p, y) == 0.5
        assert H.accuracy(p, y) == 0.5

    def test_degenerate_cases_are_zero(self):
        assert H.matthews([1, 1, 1], [1, 1, 1]) == 0.0
        assert H.matthews([0, 0, 0], [0, 1, 0]) == 0.0
        assert H.f1_binary([0, 0], [0, 0]) == 0.0
        assert H.pearson([1.0, 1.0, 1.0], [0.0, 1.0, 2.0]) == 0.0

    def test_pearson_extremes(self):
        x = np.arange(10.0)
        assert H.pearson(x, 3 * x + 1) == 1.0
        assert H.pearson(x, -x) == -1.0

    def test_perfect_matthews(self):
        assert H.matthews([0, 1, 2, 1], [0, 1, 2, 1]) == pytest.approx(1.0)

    @pytest.mark.parametrize("metric", sorted(H.METRICS))
    def test_shape_and_empty_checks(self, metric):
        with pytest.raises(ValueError):
            H.METRICS[metric]([1, 0], [1])
        with pytest.raises(ValueError):
            H.METRICS[metric]([], [])
