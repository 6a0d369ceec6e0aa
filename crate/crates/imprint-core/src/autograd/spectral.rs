//! Spectral energy op: squared magnitude of the centered low-pass window of
//! a plane's 2D spectrum, differentiable with respect to the plane.

use ndarray::{ArrayD, Ix2, IxDyn};

use super::{BackFn, GradSink, Graph, Var};
use crate::fourier;
use crate::real::Real;

impl<T: Real> Graph<T> {
    /// Energy of the centered k x k window of the unnormalized 2D spectrum.
    pub fn lowpass_energy(&self, s: Var, k: usize) -> Var {
        let vs = self.value(s);
        let s2 = vs
            .view()
            .into_dimensionality::<Ix2>()
            .expect("lowpass_energy wants a plane");
        let value = fourier::lowpass_energy_value(&s2, k);
        let out = ArrayD::from_elem(IxDyn(&[]), T::of(value));
        let back = self.wants_grad(&[s]).then(|| {
            let cs = vs.clone();
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let g = gy[IxDyn(&[])];
                let s2 = cs.view().into_dimensionality::<Ix2>().unwrap();
                let grad = fourier::lowpass_energy_grad(&s2, k).mapv(|v| v * g);
                sink.add(s, grad.into_dyn());
            }) as BackFn<T>
        });
        self.interior(out, back)
    }
}
