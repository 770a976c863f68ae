use permsplit_py::permsplit as extension;
use pyo3::prelude::*;

#[test]
fn module_works_from_embedded_interpreter() {
    pyo3::append_to_inittab!(extension);
    Python::initialize();
    Python::attach(|py| {
        let code = c"
import permsplit as ps
key = ps.ShuffleKey.generate(3, 4, 7)
z = ps.Matrix([[1.0, 2.0, 3.0, 4.0], [0.5, 0.0, -1.0, 2.0], [3.0, 1.0, 0.0, -2.0]])
p_r = key.row_perm(0, 1)
assert ps.unshuffle_output(ps.shuffle_feature(z, p_r, key), p_r, key) == z
cloud = ps.CloudModel.init(1, 4, 3, 'full', 'tanh')
s = ps.shuffle_feature(z, p_r, key)
gap = ps.unshuffle_output(cloud.authorize(key.p_col).forward(s), p_r, key).max_abs_diff(cloud.forward(z))
assert gap < 1e-9, gap
try:
    ps.Matrix([[1.0], [1.0, 2.0]])
    raise AssertionError('ragged rows accepted')
except ValueError:
    pass
";
        py.run(code, None, None).unwrap();
    });
}
