//! Flow density diagnostics over pooled sentence latents.

use serde::Serialize;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::flow::transform_latent_graph;
use crate::seq2seq::TranslationModel;
use crate::vocab::{Lang, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityReport {
    pub lang: Lang,
    pub sentences: usize,
    /// Log-likelihood of the pooled latents under the language's own flow.
    pub mean_log_likelihood: f64,
    pub min_log_likelihood: f64,
    pub max_log_likelihood: f64,
    /// Mean log-likelihood of the transformed latents under the other
    /// language's flow.
    pub cross_mean_log_likelihood: f64,
}

pub fn density_report(model: &TranslationModel, corpus: &[TokenSequence], lang: Lang) -> Result<DensityReport> {
    if corpus.is_empty() {
        return Err(Error::Usage("density report needs a non-empty corpus".into()));
    }
    let (Some(own), Some(other)) = (model.flow(lang), model.flow(lang.other())) else {
        return Err(Error::Config("density report needs a model with flows".into()));
    };
    let mut own_ll = Vec::with_capacity(corpus.len());
    let mut cross_ll = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(64) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let enc = model.encode(&refs)?;
        let z = model.pool(&enc);
        let mut g = Graph::inference(model.params());
        let zv = g.constant(z);
        let lp = own.log_prob(&mut g, model.base(), zv)?;
        own_ll.extend_from_slice(g.value(lp).data());
        let zy = transform_latent_graph(&mut g, own, other, zv)?;
        let lp = other.log_prob(&mut g, model.base(), zy)?;
        cross_ll.extend_from_slice(g.value(lp).data());
    }
    let n = own_ll.len() as f64;
    Ok(DensityReport {
        lang,
        sentences: own_ll.len(),
        mean_log_likelihood: own_ll.iter().sum::<f64>() / n,
        min_log_likelihood: own_ll.iter().copied().fold(f64::INFINITY, f64::min),
        max_log_likelihood: own_ll.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        cross_mean_log_likelihood: cross_ll.iter().sum::<f64>() / n,
    })
}
