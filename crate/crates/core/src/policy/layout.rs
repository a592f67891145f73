//! Where each weight tensor lives inside the flat parameter vector.

use std::ops::Range;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// N(0, 0.02²): embeddings and the output head.
    Embedding,
    /// N(0, 1/d_model): projections feeding a nonlinearity or attention.
    FanIn,
    /// N(0, 1/(d_model·n_layers)): projections writing into the residual stream.
    Residual,
    Zero,
    One,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seg {
    pub off: usize,
    pub len: usize,
}

impl Seg {
    pub fn range(&self) -> Range<usize> {
        self.off..self.off + self.len
    }
}

#[derive(Clone, Debug)]
pub struct LayerSegs {
    pub ln1_g: Seg,
    pub ln1_b: Seg,
    pub w_qkv: Seg,
    pub b_qkv: Seg,
    pub w_o: Seg,
    pub b_o: Seg,
    pub ln2_g: Seg,
    pub ln2_b: Seg,
    pub w_fc1: Seg,
    pub b_fc1: Seg,
    pub w_fc2: Seg,
    pub b_fc2: Seg,
}

#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub class_emb: Seg,
    pub in_w: Seg,
    pub in_b: Seg,
    pub scale_emb: Seg,
    pub pos_emb: Seg,
    pub layers: Vec<LayerSegs>,
    pub lnf_g: Seg,
    pub lnf_b: Seg,
    pub head_w: Seg,
    pub head_b: Seg,
    /// Every segment in storage order with its name and initialiser.
    pub named: Vec<(String, Seg, InitKind)>,
    pub total: usize,
}

pub struct LayoutDims {
    pub n_classes: usize,
    pub latent_dim: usize,
    pub num_scales: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub vocab: usize,
}

pub const MLP_RATIO: usize = 4;

struct Builder {
    off: usize,
    named: Vec<(String, Seg, InitKind)>,
}

impl Builder {
    fn seg(&mut self, name: String, len: usize, init: InitKind) -> Seg {
        let s = Seg { off: self.off, len };
        self.off += len;
        self.named.push((name, s, init));
        s
    }
}

impl ParamLayout {
    pub fn new(dims: &LayoutDims) -> Self {
        let d = dims.d_model;
        let hidden = MLP_RATIO * d;
        let mut b = Builder {
            off: 0,
            named: Vec::new(),
        };
        // one extra row for the null (unconditional) class
        let class_emb = b.seg("class_emb".into(), (dims.n_classes + 1) * d, InitKind::Embedding);
        let in_w = b.seg("in_w".into(), dims.latent_dim * d, InitKind::Embedding);
        let in_b = b.seg("in_b".into(), d, InitKind::Zero);
        let scale_emb = b.seg("scale_emb".into(), dims.num_scales * d, InitKind::Embedding);
        let pos_emb = b.seg("pos_emb".into(), dims.seq_len * d, InitKind::Embedding);
        let layers = (0..dims.n_layers)
            .map(|l| LayerSegs {
                ln1_g: b.seg(format!("layer{l}.ln1_g"), d, InitKind::One),
                ln1_b: b.seg(format!("layer{l}.ln1_b"), d, InitKind::Zero),
                w_qkv: b.seg(format!("layer{l}.w_qkv"), d * 3 * d, InitKind::FanIn),
                b_qkv: b.seg(format!("layer{l}.b_qkv"), 3 * d, InitKind::Zero),
                w_o: b.seg(format!("layer{l}.w_o"), d * d, InitKind::Residual),
                b_o: b.seg(format!("layer{l}.b_o"), d, InitKind::Zero),
                ln2_g: b.seg(format!("layer{l}.ln2_g"), d, InitKind::One),
                ln2_b: b.seg(format!("layer{l}.ln2_b"), d, InitKind::Zero),
                w_fc1: b.seg(format!("layer{l}.w_fc1"), d * hidden, InitKind::FanIn),
                b_fc1: b.seg(format!("layer{l}.b_fc1"), hidden, InitKind::Zero),
                w_fc2: b.seg(format!("layer{l}.w_fc2"), hidden * d, InitKind::Residual),
                b_fc2: b.seg(format!("layer{l}.b_fc2"), d, InitKind::Zero),
            })
            .collect();
        let lnf_g = b.seg("lnf_g".into(), d, InitKind::One);
        let lnf_b = b.seg("lnf_b".into(), d, InitKind::Zero);
        let head_w = b.seg("head_w".into(), d * dims.vocab, InitKind::Embedding);
        let head_b = b.seg("head_b".into(), dims.vocab, InitKind::Zero);
        ParamLayout {
            class_emb,
            in_w,
            in_b,
            scale_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            total: b.off,
            named: b.named,
        }
    }
}
