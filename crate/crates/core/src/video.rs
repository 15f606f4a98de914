//! Tensor newtypes for videos, content frames, motion latents and class ids.

use ndarray::{concatenate, s, Array3, Array4, ArrayD, Axis, Ix3};

use cmdlab_autograd::Real;

use crate::error::{Error, Result};

/// A clip `[C, L, H, W]` with values in `[-1, 1]` and `L > 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor<F: Real> {
    data: Array4<F>,
}

impl<F: Real> VideoTensor<F> {
    pub fn new(data: Array4<F>) -> Result<Self> {
        let (c, l, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Invariant(format!("video dims must be positive, got {:?}", data.shape())));
        }
        if l < 2 {
            return Err(Error::Invariant(format!("video needs L > 1 frames, got {l}")));
        }
        let one = F::one();
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || v.abs() > one) {
            return Err(Error::Invariant(format!("video value {bad} outside [-1, 1]")));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array4<F> {
        &self.data
    }

    pub fn into_inner(self) -> Array4<F> {
        self.data
    }

    /// `(C, L, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn frame(&self, l: usize) -> Array3<F> {
        self.data.slice(s![.., l, .., ..]).to_owned()
    }

    pub fn cast<G: Real>(&self) -> VideoTensor<G> {
        VideoTensor {
            data: self.data.mapv(|x| G::of(x.to_f64_lossy())),
        }
    }
}

/// The per-pixel temporal blend `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentFrame<F: Real> {
    pub data: Array3<F>,
}

impl<F: Real> ContentFrame<F> {
    pub fn new(data: Array3<F>) -> Self {
        Self { data }
    }

    pub fn from_dyn(a: ArrayD<F>) -> Result<Self> {
        let shape = a.shape().to_vec();
        a.into_dimensionality::<Ix3>()
            .map(Self::new)
            .map_err(|_| Error::dim("content_frame", &shape, &[0, 0, 0]))
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

/// Motion code `(z_x [D, L, H'], z_y [D, L, W'])`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionLatent<F: Real> {
    pub zx: Array3<F>,
    pub zy: Array3<F>,
}

impl<F: Real> MotionLatent<F> {
    pub fn new(zx: Array3<F>, zy: Array3<F>) -> Result<Self> {
        if zx.shape()[..2] != zy.shape()[..2] {
            return Err(Error::dim("motion_latent", zx.shape(), zy.shape()));
        }
        Ok(Self { zx, zy })
    }

    /// `(D, L, H', W')`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let (d, l, h) = self.zx.dim();
        (d, l, h, self.zy.shape()[2])
    }

    pub fn num_elements(&self) -> usize {
        self.zx.len() + self.zy.len()
    }

    /// Both parts joined along the last axis: `[D, L, H' + W']`.
    pub fn pack(&self) -> ArrayD<F> {
        concatenate(Axis(2), &[self.zx.view(), self.zy.view()])
            .expect("matching leading dims")
            .into_dyn()
    }

    pub fn unpack(packed: &ArrayD<F>, latent_h: usize) -> Result<Self> {
        let a = packed
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::dim("motion_latent::unpack", packed.shape(), &[0, 0, 0]))?;
        if a.shape()[2] <= latent_h {
            return Err(Error::dim("motion_latent::unpack", packed.shape(), &[latent_h]));
        }
        Self::new(
            a.slice(s![.., .., ..latent_h]).to_owned(),
            a.slice(s![.., .., latent_h..]).to_owned(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.zx.iter().chain(self.zy.iter()).all(|v| v.is_finite())
    }
}

/// Class condition; `num_classes` itself is the reserved null id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConditionId(usize);

impl ConditionId {
    pub fn new(id: usize, num_classes: usize) -> Result<Self> {
        if id > num_classes {
            return Err(Error::Condition { id, null_id: num_classes });
        }
        Ok(Self(id))
    }

    pub fn null(num_classes: usize) -> Self {
        Self(num_classes)
    }

    pub fn value(self) -> usize {
        self.0
    }

    pub fn is_null(self, num_classes: usize) -> bool {
        self.0 == num_classes
    }
}
