//! State estimation for partially PMU-observed power grids with a graph
//! neural network whose first layer takes the expectation over Gaussian
//! mixtures at buses without measurements.

pub mod bddc;
pub mod datagen;
pub mod eval;
pub mod gnn;
pub mod grid;
pub mod numerics;
pub mod powerflow;
pub mod stability;
pub mod train;

use bddc::BddcError;
use datagen::DataError;
use eval::EvalError;
use gnn::ModelError;
use grid::GridError;
use numerics::NumericsError;
use powerflow::PowerFlowError;
use stability::StabilityError;
use train::TrainError;

/// Process exit status classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    /// Bad arguments, files or configuration.
    Input = 2,
    /// Non-convergence, divergence or non-finite values.
    Numerical = 3,
    /// A checked guarantee does not hold.
    Contract = 4,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Bddc(#[from] BddcError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Contract(String),
}

impl Error {
    pub fn exit_kind(&self) -> ExitKind {
        match self {
            Self::Numerics(e) => numerics_kind(e),
            Self::Grid(_) | Self::Bddc(_) | Self::Input(_) => ExitKind::Input,
            Self::PowerFlow(e) => power_flow_kind(e),
            Self::Data(e) => data_kind(e),
            Self::Model(e) => model_kind(e),
            Self::Train(e) => train_kind(e),
            Self::Stability(e) => match e {
                StabilityError::Model(m) => model_kind(m),
                StabilityError::Grid(_) | StabilityError::Depth | StabilityError::Features(..) => {
                    ExitKind::Input
                }
                StabilityError::Io(_) => ExitKind::Input,
            },
            Self::Eval(e) => match e {
                EvalError::Model(m) => model_kind(m),
                EvalError::Train(t) => train_kind(t),
                EvalError::Data(d) => data_kind(d),
                EvalError::PowerFlow(p) => power_flow_kind(p),
                EvalError::ZeroMagnitude { .. } => ExitKind::Numerical,
                _ => ExitKind::Input,
            },
            Self::Contract(_) => ExitKind::Contract,
        }
    }
}

fn numerics_kind(e: &NumericsError) -> ExitKind {
    match e {
        NumericsError::NonFinite { .. } => ExitKind::Numerical,
        _ => ExitKind::Input,
    }
}

fn power_flow_kind(e: &PowerFlowError) -> ExitKind {
    match e {
        PowerFlowError::ZeroImpedance(_) => ExitKind::Input,
        _ => ExitKind::Numerical,
    }
}

fn data_kind(e: &DataError) -> ExitKind {
    match e {
        DataError::NonConvergence { .. } | DataError::DegenerateEm { .. } | DataError::EmNotMonotone { .. } => {
            ExitKind::Numerical
        }
        _ => ExitKind::Input,
    }
}

fn model_kind(e: &ModelError) -> ExitKind {
    match e {
        ModelError::NonFinite { .. } => ExitKind::Numerical,
        ModelError::Numerics(n) => numerics_kind(n),
        _ => ExitKind::Input,
    }
}

fn train_kind(e: &TrainError) -> ExitKind {
    match e {
        TrainError::Diverged { .. } => ExitKind::Numerical,
        TrainError::Em { source, .. } => data_kind(source),
        TrainError::Model(m) => model_kind(m),
        TrainError::Numerics(n) => numerics_kind(n),
        TrainError::Config(_) | TrainError::Dataset { .. } => ExitKind::Input,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let diverged = Error::from(TrainError::Diverged { epoch: 3 });
        assert_eq!(diverged.exit_kind().code(), 3);
        assert_eq!(Error::from(BddcError::Alpha(0.0)).exit_kind().code(), 2);
        assert_eq!(Error::from(GridError::SlackCount(0)).exit_kind(), ExitKind::Input);
        assert_eq!(Error::Contract("violated".into()).exit_kind().code(), 4);
        let pf = PowerFlowError::SingularJacobian(2);
        assert_eq!(Error::from(EvalError::PowerFlow(pf)).exit_kind(), ExitKind::Numerical);
        assert_eq!(
            Error::from(ModelError::NonFinite { row: 0 }).exit_kind(),
            ExitKind::Numerical
        );
    }
}
