//! Static feature-browser page built from decile profiles.
//!
//! The output is a single XHTML document with inline styles and no external
//! references. Tokens are identified by `(sample_id, token_index)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{ensure, Result};
use crate::metrics::{DecileProfile, ProfileStatus};

const STYLE: &str = "body{font-family:sans-serif;margin:2em}\
table{border-collapse:collapse;margin:0.5em 0}\
td,th{border:1px solid #999;padding:2px 6px;text-align:right}\
.dead{color:#888}.warn{color:#a40}";

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub html: String,
    /// Features that never fired in any modality.
    pub dead_features: Vec<u32>,
    pub warnings: Vec<String>,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn modality_block(html: &mut String, p: &DecileProfile, warnings: &mut Vec<String>) {
    let _ = write!(html, "<h3>{}</h3>", p.modality);
    if p.status == ProfileStatus::Dead {
        let _ = write!(
            html,
            "<p class=\"dead\">never fires on {} tokens</p>",
            p.modality
        );
        return;
    }
    let _ = write!(html, "<p>{} activations", p.count);
    if p.status == ProfileStatus::Partial {
        html.push_str(" (partial: fewer than ten)");
    }
    html.push_str("</p><table><tr><th>decile</th>");
    for k in 1..=p.boundaries.len() {
        let _ = write!(html, "<th>{k}</th>");
    }
    html.push_str("</tr><tr><th>upper bound</th>");
    for b in &p.boundaries {
        let _ = write!(html, "<td>{b:.4}</td>");
    }
    html.push_str("</tr></table>");
    html.push_str("<table><tr><th>sample</th><th>token</th><th>activation</th></tr>");
    if p.exemplars.is_empty() {
        html.push_str("<tr><td colspan=\"3\" class=\"warn\">no exemplar references</td></tr>");
        warnings.push(format!(
            "feature {} ({}): no exemplar references",
            p.feature, p.modality
        ));
    }
    for e in &p.exemplars {
        let _ = write!(
            html,
            "<tr><td>{}</td><td>{}</td><td>{:.4}</td></tr>",
            e.sample_id, e.token_index, e.activation
        );
    }
    html.push_str("</table>");
}

/// Renders one page covering every feature in `profiles`.
pub fn emit_report(profiles: &[DecileProfile], title: &str) -> Result<Report> {
    ensure!(!profiles.is_empty(), Data, "no feature profiles to report");
    let mut by_feature: BTreeMap<u32, Vec<&DecileProfile>> = BTreeMap::new();
    for p in profiles {
        by_feature.entry(p.feature).or_default().push(p);
    }
    for ps in by_feature.values_mut() {
        ps.sort_by_key(|p| p.modality);
    }
    let dead_features: Vec<u32> = by_feature
        .iter()
        .filter(|(_, ps)| ps.iter().all(|p| p.status == ProfileStatus::Dead))
        .map(|(&f, _)| f)
        .collect();

    let mut warnings = Vec::new();
    let mut html = String::new();
    let title = escape(title);
    let _ = write!(
        html,
        "<!DOCTYPE html>\n<html xmlns=\"http://www.w3.org/1999/xhtml\"><head><meta charset=\"utf-8\"/>\
         <title>{title}</title><style>{STYLE}</style></head><body><h1>{title}</h1>"
    );
    let live = by_feature.len() - dead_features.len();
    let _ = write!(
        html,
        "<p>{} features, {live} live, {} dead.</p>",
        by_feature.len(),
        dead_features.len()
    );
    for (f, ps) in &by_feature {
        if dead_features.contains(f) {
            continue;
        }
        let _ = write!(html, "<section id=\"feature-{f}\"><h2>Feature {f}</h2>");
        for p in ps {
            modality_block(&mut html, p, &mut warnings);
        }
        html.push_str("</section>");
    }
    html.push_str("<section id=\"dead\"><h2>Dead features</h2>");
    if dead_features.is_empty() {
        html.push_str("<p>none</p>");
    } else {
        html.push_str("<p class=\"dead\">");
        let list: Vec<String> = dead_features.iter().map(u32::to_string).collect();
        html.push_str(&list.join(", "));
        html.push_str("</p>");
    }
    html.push_str("</section></body></html>\n");
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Report {
        html,
        dead_features,
        warnings,
    })
}

pub fn write_report(path: &Path, profiles: &[DecileProfile], title: &str) -> Result<Report> {
    let report = emit_report(profiles, title)?;
    std::fs::write(path, &report.html)?;
    Ok(report)
}
