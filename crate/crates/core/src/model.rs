//! The multimodal masked autoencoder: tokenizers, routed encoder stacks,
//! encoder-to-decoder projections, mirrored decoders and the reconstruction
//! loss on the tape.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Section, Tape, Var};
use crate::config::{DatasetSpec, FusionConfig, ModelDims, Multispectral, TargetNorm};
use crate::encodings::{modality_encoding, spatial_table, PositionalTable};
use crate::error::{Error, Result};
use crate::masking::{MaskPlan, TokenLayout};
use crate::nn::{Linear, Stack};
use crate::router::{build_routing, RoutingPlan};
use crate::scalar::Scalar;
use crate::targets::{normalize_targets, DEFAULT_EPS};
use crate::temporal::TimeStamp;
use crate::tokenizer::{PatchGrid, Tokenizer};

/// Patches and acquisition times of one crop, indexed like
/// `DatasetSpec::modalities`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub patches: Vec<Option<PatchGrid<f32>>>,
    pub times: Vec<Vec<TimeStamp>>,
    pub reference_day: i64,
}

#[derive(Debug, Clone)]
pub struct Mae {
    pub dataset: DatasetSpec,
    pub fusion: FusionConfig,
    pub dims: ModelDims,
    pub routing: RoutingPlan,
    pub layout: TokenLayout,
    pub tokenizers: Vec<Option<Tokenizer>>,
    pub encoder_tables: PositionalTable,
    pub decoder_tables: PositionalTable,
    pub encoders: Vec<Stack>,
    pub fusion_stack: Option<Stack>,
    pub enc_to_dec: Vec<Linear>,
    pub decoders: Vec<Stack>,
}

/// Encoder output of one sample: visible tokens of every routed sequence.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `(layout entry, local token index)` of each encoded row.
    pub members: Vec<Vec<(usize, usize)>>,
    pub outputs: Vec<Option<Var>>,
}

#[derive(Debug, Clone)]
pub struct PretrainForward {
    pub loss: Var,
    /// Per layout entry, one reconstruction per embedding, rows in
    /// `(bin, position)` order.
    pub recon: Vec<Vec<Var>>,
    /// Per layout entry, the normalized targets.
    pub targets: Vec<PatchGrid<f64>>,
}

impl Mae {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        dataset: &DatasetSpec,
        fusion: &FusionConfig,
        dims: &ModelDims,
        rng: &mut R,
    ) -> Result<Self> {
        crate::config::validate(dataset, fusion, dims).into_result()?;
        let routing = build_routing(dataset, fusion, dims)?;
        let layout = TokenLayout::from_dataset(dataset, fusion.multispectral);
        if layout.total() == 0 {
            return Err(Error::EmptyModel);
        }
        let tokenizers = dataset
            .modalities
            .iter()
            .map(|m| {
                m.is_active()
                    .then(|| Tokenizer::new(store, m, fusion.multispectral, dims.encoder_width, dims.decoder_width, rng))
            })
            .collect();
        let encoder_tables = spatial_table(&dataset.modalities, dims.encoder_width)?;
        let decoder_tables = spatial_table(&dataset.modalities, dims.decoder_width)?;
        let (depth, final_norm) = match routing.fusion_boundary {
            Some(b) => (b, false),
            None => (dims.encoder_depth, true),
        };
        let mut encoders = Vec::new();
        let mut enc_to_dec = Vec::new();
        let mut decoders = Vec::new();
        for name in &routing.param_sets {
            encoders.push(Stack::new(store, &format!("encoder.set.{name}"), depth, dims.encoder_width, dims.heads, final_norm, rng));
        }
        let fusion_stack = routing.fusion_boundary.map(|b| {
            Stack::new(store, "encoder.fusion", dims.encoder_depth - b, dims.encoder_width, dims.heads, true, rng)
        });
        for name in &routing.param_sets {
            enc_to_dec.push(Linear::new(store, &format!("enc_to_dec.{name}"), dims.encoder_width, dims.decoder_width, rng));
            decoders.push(Stack::new(store, &format!("decoder.{name}"), dims.decoder_depth, dims.decoder_width, dims.heads, true, rng));
        }
        Ok(Self {
            dataset: dataset.clone(),
            fusion: *fusion,
            dims: *dims,
            routing,
            layout,
            tokenizers,
            encoder_tables,
            decoder_tables,
            encoders,
            fusion_stack,
            enc_to_dec,
            decoders,
        })
    }

    fn tokenizer(&self, k: usize) -> &Tokenizer {
        self.tokenizers[self.layout.modalities[k].modality].as_ref().expect("active modality has a tokenizer")
    }

    /// Parameters used by [`Mae::encode`]: patch embeddings and encoder stacks.
    pub fn backbone_params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self
            .tokenizers
            .iter()
            .flatten()
            .flat_map(|t| t.embed.iter().flat_map(Linear::params))
            .collect();
        p.extend(self.encoders.iter().flat_map(Stack::params));
        if let Some(f) = &self.fusion_stack {
            p.extend(f.params());
        }
        p
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self
            .tokenizers
            .iter()
            .flatten()
            .flat_map(|t| t.project.iter().flat_map(Linear::params).chain([t.mask_token]))
            .collect();
        p.extend(self.enc_to_dec.iter().flat_map(Linear::params));
        p.extend(self.decoders.iter().flat_map(Stack::params));
        p
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        for m in &self.layout.modalities {
            let spec = &self.dataset.modalities[m.modality];
            let grid = input.patches.get(m.modality).and_then(Option::as_ref).ok_or_else(|| {
                Error::shape(format!("missing patches for modality `{}`", spec.name))
            })?;
            if grid.positions() != m.positions || grid.bins() != m.bins || grid.patch_dim() != spec.patch_dim() {
                return Err(Error::shape(format!(
                    "modality `{}` patches are {:?}, expected ({}, {}, {})",
                    spec.name,
                    grid.data.dim(),
                    m.positions,
                    m.bins,
                    spec.patch_dim()
                )));
            }
            if input.times.get(m.modality).map_or(0, Vec::len) != m.bins {
                return Err(Error::shape(format!("modality `{}` needs {} time stamps", spec.name, m.bins)));
            }
        }
        Ok(())
    }

    fn encoding<T: Scalar>(&self, tables: &PositionalTable, input: &ModelInput, k: usize) -> Vec<T> {
        let m = &self.layout.modalities[k];
        let table = tables.tables[m.modality].as_ref().expect("active modality has a table");
        modality_encoding(table, &input.times[m.modality], input.reference_day, m.per_slot)
            .into_iter()
            .map(T::of)
            .collect()
    }

    /// Embedded tokens with encoder encodings, one `[L_m, C_e]` matrix per
    /// layout entry.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<'_, T>, input: &ModelInput) -> Result<Vec<Var>> {
        self.check_input(input)?;
        let prev = tape.set_section(Section::Patchify);
        let mut out = Vec::with_capacity(self.layout.modalities.len());
        for (k, m) in self.layout.modalities.iter().enumerate() {
            let grid = input.patches[m.modality].as_ref().expect("checked");
            let x = self.tokenizer(k).embed(tape, grid);
            let enc = tape.constant(m.len(), self.dims.encoder_width, self.encoding(&self.encoder_tables, input, k));
            out.push(tape.add(x, enc));
        }
        tape.set_section(prev);
        Ok(out)
    }

    /// Runs the encoder over the visible tokens of every routed sequence.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: &[Var], mask: &MaskPlan) -> Encoded {
        let prev = tape.set_section(Section::Encoder);
        let width = self.dims.encoder_width;
        let k_of = |modality: usize| self.layout.modalities.iter().position(|m| m.modality == modality).expect("active");
        let mut members = Vec::with_capacity(self.routing.sequences.len());
        let mut outputs = Vec::with_capacity(self.routing.sequences.len());
        for seq in &self.routing.sequences {
            let mut rows = Vec::new();
            for slab in &seq.slabs {
                let k = k_of(slab.modality);
                let l = &self.layout.modalities[k];
                let flags = mask.modality_mask(k);
                for p in 0..l.positions {
                    for g in 0..l.per_slot {
                        let i = l.index(slab.bin, p, g);
                        if !flags[i] {
                            rows.push((k, i));
                        }
                    }
                }
            }
            let out = (!rows.is_empty()).then(|| {
                let x = tape.rows(rows.iter().map(|&(k, i)| (tokens[k], i)).collect(), width);
                self.encoders[seq.param_set].forward(tape, x)
            });
            members.push(rows);
            outputs.push(out);
        }
        if let Some(stack) = &self.fusion_stack {
            let present: Vec<(usize, Var)> = outputs.iter().enumerate().filter_map(|(s, o)| o.map(|v| (s, v))).collect();
            if !present.is_empty() {
                let parts: Vec<Var> = present.iter().map(|&(_, v)| v).collect();
                let joined = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
                let fused = stack.forward(tape, joined);
                let mut start = 0;
                for (s, v) in present {
                    let n = tape.shape(v).0;
                    outputs[s] = Some(tape.rows((start..start + n).map(|r| (fused, r)).collect(), width));
                    start += n;
                }
            }
        }
        tape.set_section(prev);
        Encoded { members, outputs }
    }

    /// Full-length encoder output for transfer tasks: one `[L_m, C_e]`
    /// matrix per layout entry in canonical order.
    pub fn encode_full<T: Scalar>(&self, tape: &mut Tape<'_, T>, input: &ModelInput) -> Result<Vec<Var>> {
        let tokens = self.embed(tape, input)?;
        let plan = MaskPlan::none(&self.layout);
        let enc = self.encode(tape, &tokens, &plan);
        let mut place: Vec<Vec<Option<(Var, usize)>>> =
            self.layout.modalities.iter().map(|m| vec![None; m.len()]).collect();
        for (rows, out) in enc.members.iter().zip(&enc.outputs) {
            if let Some(v) = out {
                for (r, &(k, i)) in rows.iter().enumerate() {
                    place[k][i] = Some((*v, r));
                }
            }
        }
        Ok(place
            .into_iter()
            .map(|p| tape.rows(p.into_iter().map(|s| s.expect("every token encoded")).collect(), self.dims.encoder_width))
            .collect())
    }

    /// Projects encoder outputs to the decoder width, fills masked slots
    /// with mask tokens and runs the decoders. Returns one `[L_m, C_d]`
    /// matrix per layout entry.
    pub fn decode<T: Scalar>(&self, tape: &mut Tape<'_, T>, enc: &Encoded, mask: &MaskPlan, input: &ModelInput) -> Vec<Var> {
        let cd = self.dims.decoder_width;
        let prev = tape.set_section(Section::EncToDec);
        let projected: Vec<Option<Var>> = enc
            .outputs
            .iter()
            .zip(&self.routing.sequences)
            .map(|(o, seq)| o.map(|v| self.enc_to_dec[seq.param_set].forward(tape, v)))
            .collect();
        tape.set_section(Section::Decoder);
        let k_of = |modality: usize| self.layout.modalities.iter().position(|m| m.modality == modality).expect("active");
        let encodings: Vec<Vec<T>> =
            (0..self.layout.modalities.len()).map(|k| self.encoding(&self.decoder_tables, input, k)).collect();
        let mut place: Vec<Vec<Option<(Var, usize)>>> =
            self.layout.modalities.iter().map(|m| vec![None; m.len()]).collect();
        for (s, seq) in self.routing.sequences.iter().enumerate() {
            let mut visible_row = std::collections::HashMap::new();
            for (r, &(k, i)) in enc.members[s].iter().enumerate() {
                visible_row.insert((k, i), r);
            }
            let mut sources = Vec::with_capacity(seq.length);
            let mut order = Vec::with_capacity(seq.length);
            let mut enc_rows = Vec::with_capacity(seq.length * cd);
            for slab in &seq.slabs {
                let k = k_of(slab.modality);
                let l = &self.layout.modalities[k];
                let mask_token = tape.param(self.tokenizer(k).mask_token);
                for p in 0..l.positions {
                    for g in 0..l.per_slot {
                        let i = l.index(slab.bin, p, g);
                        debug_assert_eq!(mask.modality_mask(k)[i], !visible_row.contains_key(&(k, i)));
                        sources.push(match visible_row.get(&(k, i)) {
                            Some(&r) => (projected[s].expect("visible rows exist"), r),
                            None => (mask_token, 0),
                        });
                        order.push((k, i));
                        enc_rows.extend_from_slice(&encodings[k][i * cd..(i + 1) * cd]);
                    }
                }
            }
            let x = tape.rows(sources, cd);
            let e = tape.constant(seq.length, cd, enc_rows);
            let x = tape.add(x, e);
            let y = self.decoders[seq.param_set].forward(tape, x);
            for (r, (k, i)) in order.into_iter().enumerate() {
                place[k][i] = Some((y, r));
            }
        }
        let out = place
            .into_iter()
            .map(|p| tape.rows(p.into_iter().map(|s| s.expect("every token decoded")).collect(), cd))
            .collect();
        tape.set_section(prev);
        out
    }

    /// Normalized reconstruction targets of every layout entry.
    pub fn targets(&self, input: &ModelInput) -> Vec<PatchGrid<f64>> {
        self.layout
            .modalities
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let grid = input.patches[m.modality].as_ref().expect("checked");
                let g64 = PatchGrid { patch_size: grid.patch_size, channels: grid.channels, data: grid.data.mapv(f64::from) };
                normalize_targets(&g64, &self.tokenizer(k).groups, self.fusion.target_norm, DEFAULT_EPS).grid
            })
            .collect()
    }

    /// Masked-autoencoder forward pass and reconstruction loss.
    pub fn pretrain_forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        input: &ModelInput,
        mask: &MaskPlan,
        masked_only: bool,
    ) -> Result<PretrainForward> {
        let tokens = self.embed(tape, input)?;
        let enc = self.encode(tape, &tokens, mask);
        let decoded = self.decode(tape, &enc, mask, input);
        let prev = tape.set_section(Section::Unpatchify);
        let recon: Vec<Vec<Var>> =
            decoded.iter().enumerate().map(|(k, &d)| self.tokenizer(k).project_out(tape, d)).collect();
        tape.set_section(prev);
        let targets = self.targets(input);
        let loss = self.reconstruction_loss(tape, &recon, &targets, mask, masked_only);
        Ok(PretrainForward { loss, recon, targets })
    }

    /// L1 reconstruction loss with the normalization-dependent denominator.
    pub fn reconstruction_loss<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        recon: &[Vec<Var>],
        targets: &[PatchGrid<f64>],
        mask: &MaskPlan,
        masked_only: bool,
    ) -> Var {
        let token_based = self.fusion.multispectral == Multispectral::TokenBased;
        let mut denominator = 0.0f64;
        let mut counted: Vec<Vec<bool>> = Vec::with_capacity(recon.len());
        for (k, l) in self.layout.modalities.iter().enumerate() {
            let g = self.tokenizer(k).groups.len() as f64;
            let flags: Vec<bool> = mask.modality_mask(k).iter().map(|&m| m || !masked_only).collect();
            let n = flags.iter().filter(|&&f| f).count() as f64;
            denominator += match (self.fusion.target_norm, token_based) {
                (TargetNorm::PatchGroup, false) => n * g,
                (TargetNorm::PatchGroup, true) => n,
                (_, false) => n,
                (_, true) => n / g,
            };
            debug_assert_eq!(flags.len(), l.len());
            counted.push(flags);
        }
        let mut total: Option<Var> = None;
        if denominator > 0.0 {
            let w = T::of(1.0 / denominator);
            for (k, l) in self.layout.modalities.iter().enumerate() {
                let groups = &self.tokenizer(k).groups;
                let target = &targets[k];
                for (e, &r) in recon[k].iter().enumerate() {
                    let cols: Vec<usize> = if token_based { groups[e].clone() } else { (0..target.patch_dim()).collect() };
                    let mut tv = Vec::with_capacity(l.bins * l.positions * cols.len());
                    let mut weights = Vec::with_capacity(l.bins * l.positions);
                    for t in 0..l.bins {
                        for p in 0..l.positions {
                            let patch = target.patch(p, t);
                            tv.extend(cols.iter().map(|&c| T::of(patch[c])));
                            let token = l.index(t, p, if token_based { e } else { 0 });
                            weights.push(if counted[k][token] { w } else { T::zero() });
                        }
                    }
                    let term = tape.l1_loss(r, tv, weights);
                    total = Some(match total {
                        None => term,
                        Some(acc) => tape.add(acc, term),
                    });
                }
            }
        }
        total.unwrap_or_else(|| tape.constant(1, 1, vec![T::zero()]))
    }
}
