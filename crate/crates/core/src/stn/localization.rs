use crate::error::{Error, Result};
use crate::params::{Activation, Forward, Init, LayerSpec};
use crate::tensor::{Scalar, Var};

/// Layers of the localization net named `prefix`: two 3×3 convs of
/// `hidden` channels reading `in_channels`, a 1×1 conv to `wide`, and a
/// zero-initialized dense head to six outputs.
pub fn localization_layers(prefix: &str, in_channels: usize, hidden: usize, wide: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(format!("{prefix}.conv1"), hidden, in_channels, 3),
        LayerSpec::batch_norm(format!("{prefix}.conv1.bn"), hidden),
        LayerSpec::conv(format!("{prefix}.conv2"), hidden, hidden, 3),
        LayerSpec::batch_norm(format!("{prefix}.conv2.bn"), hidden),
        LayerSpec::conv(format!("{prefix}.conv3"), wide, hidden, 1),
        LayerSpec::batch_norm(format!("{prefix}.conv3.bn"), wide),
        LayerSpec::dense(format!("{prefix}.fc"), 6, wide, Init::Zero),
    ]
}

/// Raw affine parameters N×6 in (−1, 1) for a batch of N stripe regions.
///
/// conv 3×3 → pool → conv 3×3 → pool → conv 1×1 → GAP → dense → tanh,
/// every conv followed by batch norm and `act`.
pub fn localization_forward<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    prefix: &str,
    region: Var,
    act: Activation,
) -> Result<Var> {
    let w = fwd.param(&format!("{prefix}.conv1.weight"))?;
    let expected = fwd.graph.shape(w)[1];
    let got = fwd.graph.shape(region).get(1).copied();
    if got != Some(expected) {
        return Err(Error::shape("localization_forward", fwd.graph.shape(region), fwd.graph.shape(w)));
    }
    let x = fwd.conv_block(&format!("{prefix}.conv1"), region, Some(act))?;
    let x = fwd.graph.maxpool2x2(x)?;
    let x = fwd.conv_block(&format!("{prefix}.conv2"), x, Some(act))?;
    let x = fwd.graph.maxpool2x2(x)?;
    let x = fwd.conv_block(&format!("{prefix}.conv3"), x, Some(act))?;
    let x = fwd.graph.global_avg_pool(x)?;
    let x = fwd.dense(&format!("{prefix}.fc"), x)?;
    Ok(fwd.graph.tanh(x))
}
