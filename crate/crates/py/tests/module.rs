use lpanet_py::lpanet_py;
use pyo3::prelude::*;

#[test]
fn module_runs_inside_an_embedded_interpreter() {
    pyo3::append_to_inittab!(lpanet_py);
    Python::initialize();
    Python::attach(|py| {
        py.run(
            cr#"
import lpanet_py as lp

assert lp.crop_starts(3000, 1200, 257, True) == [257 * k for k in range(8)]
assert abs(lp.aggregate([[0.5], [0.5]], "noisy_or", multilabel=True)[0] - 0.75) < 1e-12
assert len(lp.AGGREGATORS) == 12

m = lp.Model.reference(3)
s = lp.Signal([[0.01 * i for i in range(3000)]], 150.0)
local = m.local_predictions(s)
assert len(local) == 1 and len(local[0]) == 8 and len(local[0][0]) == 2

try:
    lp.aggregate([[0.5]], "no_such_kind")
except ValueError as e:
    assert "no_such_kind" in str(e)
else:
    raise AssertionError("unknown aggregator accepted")
"#,
            None,
            None,
        )
        .unwrap();
    });
}
