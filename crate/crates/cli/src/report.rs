//! Static HTML report with a species × seconds heat table per recording,
//! plus a long-format CSV of the same numbers.

use std::fmt::Write as _;
use std::io::Write;

use crate::timeline::PredictionTimeline;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Background for a probability cell: white at 0, saturated teal at 1.
fn shade(p: f32) -> String {
    let p = p.clamp(0.0, 1.0);
    let mix = |full: u8| (255.0 - (255.0 - full as f32) * p).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(0), mix(128), mix(128))
}

pub fn render_html(timelines: &[PredictionTimeline]) -> String {
    let mut h = String::new();
    h.push_str(concat!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n",
        "<title>birdscape predictions</title>\n<style>\n",
        "body{font-family:sans-serif;margin:1.5em}\n",
        "table{border-collapse:collapse;margin-bottom:2em}\n",
        "th,td{border:1px solid #ddd;padding:2px 4px;font-size:11px;text-align:center}\n",
        "th.sp{text-align:left;white-space:nowrap}\n",
        "td.on{outline:2px solid #222;outline-offset:-2px;font-weight:bold}\n",
        "</style>\n</head>\n<body>\n<h1>Per-second predictions</h1>\n",
    ));
    for t in timelines {
        let flags = t.flags();
        let _ = writeln!(
            h,
            "<h2>{}</h2>\n<p>{} s, threshold {}. Outlined cells are detections.</p>\n<table>\n<tr><th class=\"sp\">species</th>",
            escape(&t.recording_id),
            t.seconds(),
            t.threshold
        );
        for s in 0..t.seconds() {
            let _ = write!(h, "<th>{s}</th>");
        }
        h.push_str("</tr>\n");
        for (c, sp) in t.species.iter().enumerate() {
            let _ = write!(h, "<tr><th class=\"sp\">{}</th>", escape(&sp.common_name));
            for s in 0..t.seconds() {
                let p = t.probs[[s, c]];
                let class = if flags[[s, c]] == 1 { " class=\"on\"" } else { "" };
                let _ = write!(
                    h,
                    "<td{class} style=\"background:{}\" title=\"{}: {:.3} at {}-{} s\">{:.2}</td>",
                    shade(p),
                    escape(&sp.common_name),
                    p,
                    s,
                    s + 1,
                    p
                );
            }
            h.push_str("</tr>\n");
        }
        h.push_str("</table>\n");
    }
    h.push_str("</body>\n</html>\n");
    h
}

/// `recording,t_start_s,t_end_s,species,prob,flag`, one row per cell.
pub fn write_long_csv<W: Write>(timelines: &[PredictionTimeline], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["recording", "t_start_s", "t_end_s", "species", "prob", "flag"])?;
    for t in timelines {
        let flags = t.flags();
        for s in 0..t.seconds() {
            for (c, sp) in t.species.iter().enumerate() {
                out.write_record([
                    t.recording_id.clone(),
                    s.to_string(),
                    (s + 1).to_string(),
                    sp.slug(),
                    t.probs[[s, c]].to_string(),
                    flags[[s, c]].to_string(),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use birdscape::species::SpeciesList;
    use ndarray::Array2;

    #[test]
    fn html_has_one_cell_per_species_second() {
        let mut probs = Array2::<f32>::zeros((4, 6));
        probs[[2, 1]] = 0.9;
        let t = PredictionTimeline {
            recording_id: "a<b".into(),
            species: SpeciesList::kzn_six(),
            probs,
            threshold: 0.5,
        };
        let html = render_html(&[t.clone()]);
        assert_eq!(html.matches("<td").count(), 24);
        assert_eq!(html.matches("class=\"on\"").count(), 1);
        assert!(html.contains("a&lt;b"));
        assert_eq!(shade(0.0), "#ffffff");
        assert_eq!(shade(1.0), "#008080");
        let mut buf = Vec::new();
        write_long_csv(&[t], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 25);
    }
}
