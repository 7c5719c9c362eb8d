//! Receptive-field and shape analysis.

use crate::error::{Error, Result};
use crate::layers::{ConvKind, DECONV_FACTOR};
use crate::network::ArchSpec;

/// One convolutional layer of the main (non-skip) path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlanLayer {
    pub ordinal: usize,
    pub kind: ConvKind,
    pub filter: usize,
    pub features: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfRow {
    pub ordinal: usize,
    pub kind: ConvKind,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub receptive_field: usize,
    pub features: usize,
}

/// The main path of a network built from `spec`, numbered from 1 and
/// excluding the segmentation heads.
pub fn plan(spec: &ArchSpec) -> Result<Vec<PlanLayer>> {
    spec.validate()?;
    let w = &spec.widths;
    let mut layers = Vec::with_capacity(16);
    let mut push = |kind, filter, features| {
        let ordinal = layers.len() + 1;
        layers.push(PlanLayer {
            ordinal,
            kind,
            filter,
            features,
        });
    };
    for (i, &f) in w[..7].iter().enumerate() {
        let kind = if i % 2 == 1 { ConvKind::Strided(2) } else { ConvKind::Plain };
        push(kind, 3, f);
    }
    let mut prev = w[6];
    for stage in 0..3 {
        let up = 7 + 2 * stage;
        push(ConvKind::Plain, 1, (prev / 2).max(1));
        push(ConvKind::Deconv, 3, w[up]);
        push(ConvKind::Plain, 3, w[up + 1]);
        prev = w[up + 1];
    }
    Ok(layers)
}

/// Apply the receptive-field recursion to a plan: starting from 1, each
/// layer with filter `f > 1` adds `2^(η−τ)·(f−1)`, where η counts strided
/// layers before it and τ counts deconvolutions up to and including it.
pub fn trace_plan(layers: &[PlanLayer], input: [usize; 3]) -> Result<Vec<RfRow>> {
    let mut rows = Vec::new();
    let mut dims = input;
    let mut phi: i64 = 1;
    let (mut eta, mut tau) = (0i64, 0i64);
    for l in layers {
        let out = match l.kind {
            ConvKind::Plain => dims,
            ConvKind::Strided(s) => {
                for &e in &dims {
                    if e % s != 0 {
                        return Err(Error::NotDivisible { extent: e, divisor: s });
                    }
                }
                dims.map(|e| e / s)
            }
            ConvKind::Deconv => dims.map(|e| e * DECONV_FACTOR),
        };
        if l.kind == ConvKind::Deconv {
            tau += 1;
        }
        if l.filter > 1 {
            let shift = eta - tau;
            let step = (l.filter as i64 - 1) << shift.max(0) >> (-shift).max(0);
            phi += step;
            rows.push(RfRow {
                ordinal: l.ordinal,
                kind: l.kind,
                input: dims,
                output: out,
                receptive_field: phi as usize,
                features: l.features,
            });
        }
        if let ConvKind::Strided(_) = l.kind {
            eta += 1;
        }
        dims = out;
    }
    Ok(rows)
}

pub fn receptive_field_trace(spec: &ArchSpec, input: [usize; 3]) -> Result<Vec<RfRow>> {
    trace_plan(&plan(spec)?, input)
}

fn dims_text(d: [usize; 3]) -> String {
    format!("{}x{}x{}", d[0], d[1], d[2])
}

/// Aligned text table with markers at the end of the contracting path and
/// the start of the expanding path.
pub fn format_text(rows: &[RfRow]) -> String {
    let header = ["Convolution", "Input", "Output", "Receptive Field", "Features"];
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                format!("{}.", r.ordinal),
                dims_text(r.input),
                dims_text(r.output),
                format!("{0}x{0}x{0}", r.receptive_field),
                r.features.to_string(),
            ]
        })
        .collect();
    let mut width = header.map(str::len);
    for b in &body {
        for (w, cell) in width.iter_mut().zip(b) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: [&str; 5]| -> String {
        let joined: Vec<String> = cells.iter().zip(width).map(|(c, w)| format!("{c:<w$}")).collect();
        joined.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    let mut seen_deconv = false;
    let last_strided = rows.iter().rposition(|r| matches!(r.kind, ConvKind::Strided(_)));
    for (i, (r, b)) in rows.iter().zip(&body).enumerate() {
        if r.kind == ConvKind::Deconv && !seen_deconv {
            out.push_str("-- begin of expanding path --\n");
            seen_deconv = true;
        }
        out.push_str(&line([&b[0], &b[1], &b[2], &b[3], &b[4]]));
        if Some(i) == last_strided {
            out.push_str("-- end of contracting path --\n");
        }
    }
    out
}

pub fn format_csv(rows: &[RfRow]) -> String {
    let mut out = String::from("layer,input,output,receptive_field,features\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.ordinal,
            dims_text(r.input),
            dims_text(r.output),
            r.receptive_field,
            r.features
        ));
    }
    out
}
