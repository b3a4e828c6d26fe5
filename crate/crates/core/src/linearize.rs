//! Linear approximations of a forward operator and the approximation error
//! `eps(x) = A(x) - Ã x` they leave behind.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::Image;
use crate::models::{ForwardModel, ModelParams, Trajectory, DENSE_PIXEL_LIMIT};

/// A matrix-free linear map between image spaces.
///
/// Implementations panic when handed an input of the wrong shape; shape
/// agreement is checked once by the code that assembles a problem.
pub trait LinearOperator: Send + Sync {
    fn input_shape(&self) -> (usize, usize);
    fn output_shape(&self) -> (usize, usize);
    fn apply(&self, v: &Image) -> Image;
    fn apply_adjoint(&self, w: &Image) -> Image;
}

/// A possibly nonlinear forward operator that can be evaluated and expanded
/// to first order around a point.
pub trait ForwardOperator: Send + Sync {
    fn evaluate(&self, x: &Image) -> Result<Image>;

    /// First-order Taylor expansion `x -> A(x') + J(x')(x - x')` at `x' = at`.
    fn linearize(&self, at: &Image) -> Result<AffineApprox>;
}

impl ForwardOperator for ForwardModel {
    fn evaluate(&self, x: &Image) -> Result<Image> {
        ForwardModel::evaluate(self, x)
    }

    fn linearize(&self, at: &Image) -> Result<AffineApprox> {
        let trajectory = self.trajectory(at)?;
        let value = trajectory.output().clone();
        let linear = TaylorAt {
            trajectory,
            point: at.clone(),
        };
        AffineApprox::expanded_at(Box::new(linear), at, value)
    }
}

#[derive(Clone, Debug)]
pub struct Identity {
    shape: (usize, usize),
}

impl Identity {
    pub fn new(width: usize, height: usize) -> Self {
        Identity {
            shape: (width, height),
        }
    }
}

impl LinearOperator for Identity {
    fn input_shape(&self) -> (usize, usize) {
        self.shape
    }
    fn output_shape(&self) -> (usize, usize) {
        self.shape
    }
    fn apply(&self, v: &Image) -> Image {
        assert_eq!(v.shape(), self.shape, "operator input shape mismatch");
        v.clone()
    }
    fn apply_adjoint(&self, w: &Image) -> Image {
        self.apply(w)
    }
}

/// A linear forward model used as a fixed approximation for every image size.
#[derive(Clone, Debug)]
pub struct FixedModel {
    model: ForwardModel,
    shape: (usize, usize),
}

impl FixedModel {
    pub fn model(&self) -> &ForwardModel {
        &self.model
    }
}

impl LinearOperator for FixedModel {
    fn input_shape(&self) -> (usize, usize) {
        self.shape
    }
    fn output_shape(&self) -> (usize, usize) {
        self.shape
    }
    fn apply(&self, v: &Image) -> Image {
        assert_eq!(v.shape(), self.shape, "operator input shape mismatch");
        self.model
            .evaluate(v)
            .expect("linear diffusion of a finite image is finite")
    }
    fn apply_adjoint(&self, w: &Image) -> Image {
        // The Neumann Laplacian step is symmetric, so the map is self-adjoint.
        self.apply(w)
    }
}

/// Linear diffusion with the given parameters on `width x height` images.
pub fn fixed_approx(ld_params: ModelParams, width: usize, height: usize) -> Result<FixedModel> {
    Ok(FixedModel {
        model: ForwardModel::linear_diffusion(ld_params)?,
        shape: (width, height),
    })
}

/// Jacobian of a forward model at a stored expansion point.
#[derive(Clone, Debug)]
pub struct TaylorAt {
    trajectory: Trajectory,
    point: Image,
}

impl TaylorAt {
    pub fn point(&self) -> &Image {
        &self.point
    }

    /// Model value at the expansion point.
    pub fn value(&self) -> &Image {
        self.trajectory.output()
    }
}

impl LinearOperator for TaylorAt {
    fn input_shape(&self) -> (usize, usize) {
        self.trajectory.shape()
    }
    fn output_shape(&self) -> (usize, usize) {
        self.trajectory.shape()
    }
    fn apply(&self, v: &Image) -> Image {
        self.trajectory.jvp(v)
    }
    fn apply_adjoint(&self, w: &Image) -> Image {
        self.trajectory.vjp(w)
    }
}

/// Dense matrix acting on row-major flattened images.
#[derive(Clone, Debug)]
pub struct DenseMatrix {
    matrix: DMatrix<f64>,
    input_shape: (usize, usize),
    output_shape: (usize, usize),
}

impl DenseMatrix {
    pub fn new(
        matrix: DMatrix<f64>,
        input_shape: (usize, usize),
        output_shape: (usize, usize),
    ) -> Result<Self> {
        if matrix.ncols() != input_shape.0 * input_shape.1 {
            return Err(Error::shape(input_shape, (matrix.ncols(), 1)));
        }
        if matrix.nrows() != output_shape.0 * output_shape.1 {
            return Err(Error::shape(output_shape, (matrix.nrows(), 1)));
        }
        Ok(DenseMatrix {
            matrix,
            input_shape,
            output_shape,
        })
    }

    /// Square matrix acting on `n x 1` images.
    pub fn square(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        Self::new(matrix, (n, 1), (n, 1))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    fn mul(&self, m: &DMatrix<f64>, v: &Image, shape: (usize, usize)) -> Image {
        let out = m * DVector::from_column_slice(v.values());
        Image::new(shape.0, shape.1, out.as_slice().to_vec())
            .expect("finite matrix times finite vector")
    }
}

impl LinearOperator for DenseMatrix {
    fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }
    fn output_shape(&self) -> (usize, usize) {
        self.output_shape
    }
    fn apply(&self, v: &Image) -> Image {
        assert_eq!(v.shape(), self.input_shape, "operator input shape mismatch");
        self.mul(&self.matrix, v, self.output_shape)
    }
    fn apply_adjoint(&self, w: &Image) -> Image {
        assert_eq!(
            w.shape(),
            self.output_shape,
            "operator input shape mismatch"
        );
        let out = self.matrix.tr_mul(&DVector::from_column_slice(w.values()));
        Image::new(
            self.input_shape.0,
            self.input_shape.1,
            out.as_slice().to_vec(),
        )
        .expect("finite matrix times finite vector")
    }
}

/// A linear matrix is its own (exact) forward operator.
impl ForwardOperator for DenseMatrix {
    fn evaluate(&self, x: &Image) -> Result<Image> {
        x.check_shape(self.input_shape)?;
        Ok(self.apply(x))
    }

    fn linearize(&self, at: &Image) -> Result<AffineApprox> {
        at.check_shape(self.input_shape)?;
        Ok(AffineApprox {
            linear: Box::new(self.clone()),
            offset: Image::zeros(self.output_shape.0, self.output_shape.1),
        })
    }
}

/// `x -> offset + linear(x)`.
pub struct AffineApprox {
    pub linear: Box<dyn LinearOperator>,
    pub offset: Image,
}

impl AffineApprox {
    /// Builds the expansion whose value at `point` equals `value`.
    pub fn expanded_at(
        linear: Box<dyn LinearOperator>,
        point: &Image,
        value: Image,
    ) -> Result<Self> {
        point.check_shape(linear.input_shape())?;
        value.check_shape(linear.output_shape())?;
        let offset = &value - &linear.apply(point);
        Ok(AffineApprox { linear, offset })
    }

    pub fn eval(&self, x: &Image) -> Image {
        &self.offset + &self.linear.apply(x)
    }
}

/// First-order Taylor expansion of `model` at `x_k`.
pub fn taylor_at(model: &dyn ForwardOperator, x_k: &Image) -> Result<AffineApprox> {
    model.linearize(x_k)
}

/// `A(x) - Ã x`.
pub fn approx_error(
    model: &dyn ForwardOperator,
    approx: &dyn LinearOperator,
    x: &Image,
) -> Result<Image> {
    x.check_shape(approx.input_shape())?;
    let exact = model.evaluate(x)?;
    exact.check_shape(approx.output_shape())?;
    Ok(&exact - &approx.apply(x))
}

/// Materializes `op` column by column. Small grids only.
pub fn to_dense(op: &dyn LinearOperator) -> Result<DMatrix<f64>> {
    let (iw, ih) = op.input_shape();
    let (ow, oh) = op.output_shape();
    let (n, m) = (iw * ih, ow * oh);
    if n.max(m) > DENSE_PIXEL_LIMIT {
        return Err(Error::GridTooLarge {
            pixels: n.max(m),
            limit: DENSE_PIXEL_LIMIT,
        });
    }
    let mut out = DMatrix::zeros(m, n);
    for k in 0..n {
        let col = op.apply(&Image::basis(iw, ih, k));
        out.column_mut(k).copy_from_slice(col.values());
    }
    Ok(out)
}
