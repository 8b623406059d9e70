use agcn_py::agcn_module;
use pyo3::prelude::*;

#[test]
fn module_imports_and_maps_errors() {
    pyo3::append_to_inittab!(agcn_module);
    Python::initialize();
    Python::attach(|py| {
        py.run(
            c"
import agcn
assert agcn.subgraph_centers(20) == [11, 12, 13, 14, 15]
s, c = agcn.select_nodes([0.0, 3.0, 1.0, 2.0] * 4, 4, 4, 4)
assert s == [1, 5, 9, 13] and c == [2, 6, 11, 15], (s, c)
t = agcn.Tensor([2, 3], [float(i) for i in range(6)])
assert t.shape == [2, 3] and t.reshape([3, 2]).tolist() == t.tolist()
cfg = agcn.Config.tiny('audio', 3)
assert cfg.modality == 'audio' and cfg.input_shape == [1, 101, 32]
for bad in (lambda: agcn.subgraph_centers(5), lambda: agcn.Config.tiny('smell', 2)):
    try:
        bad()
    except ValueError:
        pass
    else:
        raise AssertionError('expected ValueError')
try:
    agcn.Tensor.load('/nonexistent/x.agt')
except OSError:
    pass
else:
    raise AssertionError('expected OSError')
",
            None,
            None,
        )
        .unwrap();
    });
}
