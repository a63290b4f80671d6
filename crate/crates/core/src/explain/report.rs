use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::RgbImage;

use sha2::{Digest, Sha256};

use super::{scan_members, BBox, ConceptGallery, MemberPatch, MemberScan, Scoresheet};
use crate::error::{Error, Result};
use crate::model::{checkpoint, ProtoConceptsNet};
use crate::training::LabeledTensors;

/// What a report shows.
#[derive(Clone, Copy, Debug)]
pub enum Report<'a> {
    Galleries(&'a [ConceptGallery]),
    Scoresheet(&'a Scoresheet),
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn bbox_str(b: &BBox) -> String {
    format!("{},{},{},{}", b.x0, b.y0, b.x1, b.y1)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn save_crop(images: &HashMap<&str, &RgbImage>, id: &str, bbox: &BBox, path: &Path) -> Result<()> {
    let img = images
        .get(id)
        .ok_or_else(|| Error::Dataset(format!("image {id} not available for the report")))?;
    let x1 = bbox.x1.min(img.width());
    let y1 = bbox.y1.min(img.height());
    let crop =
        image::imageops::crop_imm(*img, bbox.x0, bbox.y0, x1 - bbox.x0, y1 - bbox.y0).to_image();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    crop.save(path).map_err(|e| Error::image(path, e))
}

fn member_lines(out: &mut String, prefix: &str, k: usize, m: &MemberPatch) {
    let _ = writeln!(out, "{prefix}.{k}.image={}", m.image_id);
    let _ = writeln!(out, "{prefix}.{k}.label={}", m.label);
    let _ = writeln!(out, "{prefix}.{k}.row={}", m.row);
    let _ = writeln!(out, "{prefix}.{k}.col={}", m.col);
    let _ = writeln!(out, "{prefix}.{k}.similarity={}", m.similarity);
    let _ = writeln!(out, "{prefix}.{k}.distance={}", m.distance);
    let _ = writeln!(out, "{prefix}.{k}.bbox={}", bbox_str(&m.bbox));
}

fn gallery_html(
    html: &mut String,
    g: &[MemberPatch],
    prototype: usize,
    images: &HashMap<&str, &RgbImage>,
    out_dir: &Path,
) -> Result<()> {
    html.push_str("<div class=\"gallery\">");
    for (k, m) in g.iter().enumerate() {
        let rel = format!("prototypes/{prototype}/member_{k}.png");
        save_crop(images, &m.image_id, &m.bbox, &out_dir.join(&rel))?;
        let _ = write!(
            html,
            "<figure><img src=\"{rel}\"><figcaption>{} ({}, {}) d={:.4}</figcaption></figure>",
            escape(&m.image_id),
            m.row,
            m.col,
            m.distance
        );
    }
    html.push_str("</div>\n");
    Ok(())
}

const STYLE: &str =
    "body{font-family:sans-serif;margin:2em}figure{display:inline-block;margin:4px}\
img{height:96px;image-rendering:pixelated}section{border-top:1px solid #ccc;padding:8px 0}\
table{border-collapse:collapse}td,th{padding:2px 8px;text-align:right}";

/// Writes `index.html`, image crops under `prototypes/<id>/`, and
/// `sidecar.txt` with every number in the report. Output depends only on the
/// inputs, so regenerating over an existing directory yields identical bytes.
pub fn render_report(
    report: Report<'_>,
    classes: &[String],
    images: &HashMap<&str, &RgbImage>,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let class_name = |c: usize| classes.get(c).cloned().unwrap_or_else(|| c.to_string());
    let mut html =
        format!("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><style>{STYLE}</style>");
    let mut side = String::new();
    match report {
        Report::Galleries(galleries) => {
            html.push_str(
                "<title>Prototype galleries</title></head><body>\n<h1>Prototype galleries</h1>\n",
            );
            let _ = writeln!(side, "prototypes={}", galleries.len());
            for g in galleries {
                let j = g.prototype;
                let names: Vec<String> = g.classes.iter().map(|&c| class_name(c)).collect();
                let _ = writeln!(
                    html,
                    "<section id=\"p{j}\"><h2>Prototype {j}</h2><p>classes: {} | shown: {}</p>",
                    escape(&names.join(", ")),
                    g.members.len()
                );
                let ids: Vec<String> = g.classes.iter().map(usize::to_string).collect();
                let _ = writeln!(side, "prototype.{j}.classes={}", ids.join(","));
                let _ = writeln!(side, "prototype.{j}.shown={}", g.members.len());
                for (k, m) in g.members.iter().enumerate() {
                    member_lines(&mut side, &format!("prototype.{j}.member"), k, m);
                }
                gallery_html(&mut html, &g.members, j, images, out_dir)?;
                html.push_str("</section>\n");
            }
        }
        Report::Scoresheet(sheet) => {
            let _ = writeln!(
                html,
                "<title>Explanation</title></head><body>\n<h1>{}</h1>\n<p>predicted: {}</p>",
                escape(&sheet.image_id),
                escape(&class_name(sheet.predicted))
            );
            let _ = writeln!(side, "image={}", sheet.image_id);
            let _ = writeln!(side, "predicted={}", sheet.predicted);
            let _ = writeln!(side, "predicted_class={}", class_name(sheet.predicted));
            html.push_str("<table><tr><th>class</th><th>logit</th></tr>\n");
            for (c, t) in sheet.class_totals.iter().enumerate() {
                let _ = writeln!(
                    html,
                    "<tr><td>{}</td><td>{t:.6}</td></tr>",
                    escape(&class_name(c))
                );
                let _ = writeln!(side, "class.{c}.total={t}");
            }
            html.push_str("</table>\n");
            let _ = writeln!(side, "rows={}", sheet.rows.len());
            for (i, row) in sheet.rows.iter().enumerate() {
                let j = row.prototype;
                let rel = format!("prototypes/{j}/this_patch.png");
                save_crop(images, &sheet.image_id, &row.bbox, &out_dir.join(&rel))?;
                let _ = writeln!(
                    html,
                    "<section id=\"p{j}\"><h2>This looks like prototype {j}</h2>\
                     <figure><img src=\"{rel}\"><figcaption>this image</figcaption></figure>\
                     <p>similarity {:.6} × weight {:.6} = {:.6}</p>",
                    row.similarity, row.weight, row.contribution
                );
                let _ = writeln!(side, "row.{i}.prototype={j}");
                let _ = writeln!(side, "row.{i}.similarity={}", row.similarity);
                let _ = writeln!(side, "row.{i}.weight={}", row.weight);
                let _ = writeln!(side, "row.{i}.contribution={}", row.contribution);
                let _ = writeln!(side, "row.{i}.bbox={}", bbox_str(&row.bbox));
                for (k, m) in row.gallery.iter().enumerate() {
                    member_lines(&mut side, &format!("row.{i}.gallery"), k, m);
                }
                gallery_html(&mut html, &row.gallery, j, images, out_dir)?;
                html.push_str("</section>\n");
            }
        }
    }
    html.push_str("</body></html>\n");
    write_file(&out_dir.join("index.html"), html.as_bytes())?;
    write_file(&out_dir.join("sidecar.txt"), side.as_bytes())
}

const SCAN_HEADER: &str = "protoconcepts-scan 1";

/// Writes a member scan as tab-separated text with exact float bits.
pub fn save_scan(scan: &MemberScan, path: &Path) -> Result<()> {
    let mut out = format!("{SCAN_HEADER}\nprototypes={}\n", scan.len());
    for (j, members) in scan.iter().enumerate() {
        for m in members {
            let _ = writeln!(
                out,
                "{j}\t{}\t{}\t{}\t{:016x}\t{:016x}\t{}\t{}",
                m.image_id,
                m.row,
                m.col,
                m.similarity.to_bits(),
                m.distance.to_bits(),
                bbox_str(&m.bbox),
                m.label
            );
        }
    }
    write_file(path, out.as_bytes())
}

/// Member scan for `images`, read from or written to `cache_dir` when given.
/// The cache key hashes the checkpoint bytes and the image ids.
pub fn cached_scan(
    net: &ProtoConceptsNet,
    images: &LabeledTensors,
    cache_dir: Option<&Path>,
) -> Result<MemberScan> {
    let Some(dir) = cache_dir else {
        return scan_members(net, images);
    };
    let mut hasher = Sha256::new();
    hasher.update(checkpoint::to_bytes(net));
    for id in &images.ids {
        hasher.update(id.as_bytes());
        hasher.update([0]);
    }
    let key: String = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let path = dir.join(format!("{key}.scan"));
    if path.is_file() {
        log::info!("using cached member scan {}", path.display());
        return load_scan(&path);
    }
    let scan = scan_members(net, images)?;
    save_scan(&scan, &path)?;
    Ok(scan)
}

pub fn load_scan(path: &Path) -> Result<MemberScan> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |what: &str| Error::Dataset(format!("scan cache {}: {what}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some(SCAN_HEADER) {
        return Err(bad("unknown header"));
    }
    let m: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("prototypes="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing prototype count"))?;
    let mut scan = vec![Vec::new(); m];
    for line in lines {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(bad("malformed line"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
        let bits = |s: &str| {
            u64::from_str_radix(s, 16)
                .map(f64::from_bits)
                .map_err(|_| bad("bad float"))
        };
        let b: Vec<u32> = f[6].split(',').filter_map(|v| v.parse().ok()).collect();
        if b.len() != 4 {
            return Err(bad("bad bbox"));
        }
        let j = num(f[0])?;
        scan.get_mut(j)
            .ok_or_else(|| bad("prototype out of range"))?
            .push(MemberPatch {
                image_id: f[1].to_string(),
                row: num(f[2])?,
                col: num(f[3])?,
                similarity: bits(f[4])?,
                distance: bits(f[5])?,
                bbox: BBox {
                    x0: b[0],
                    y0: b[1],
                    x1: b[2],
                    y1: b[3],
                },
                label: num(f[7])?,
            });
    }
    Ok(scan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::ScoreRow;

    fn patch(id: &str, d: f64) -> MemberPatch {
        MemberPatch {
            image_id: id.into(),
            row: 1,
            col: 2,
            similarity: 0.1 + 0.2,
            distance: d,
            bbox: BBox {
                x0: 2,
                y0: 3,
                x1: 10,
                y1: 12,
            },
            label: 1,
        }
    }

    fn sidecar(dir: &Path) -> HashMap<String, String> {
        fs::read_to_string(dir.join("sidecar.txt"))
            .unwrap()
            .lines()
            .map(|l| {
                let (k, v) = l.split_once('=').unwrap();
                (k.to_string(), v.to_string())
            })
            .collect()
    }

    #[test]
    fn gallery_report_sections_and_idempotence() {
        let img = RgbImage::from_pixel(16, 16, image::Rgb([9, 8, 7]));
        let images: HashMap<&str, &RgbImage> = [("a", &img), ("b", &img)].into_iter().collect();
        let galleries = vec![
            ConceptGallery {
                prototype: 0,
                members: vec![patch("a", 1.0 / 3.0), patch("b", 0.5)],
                classes: vec![0],
            },
            ConceptGallery {
                prototype: 1,
                members: vec![],
                classes: vec![1],
            },
            ConceptGallery {
                prototype: 2,
                members: vec![patch("b", 0.25)],
                classes: vec![1],
            },
        ];
        let classes = vec!["x".to_string(), "y".to_string()];
        let tmp = tempfile::tempdir().unwrap();
        render_report(Report::Galleries(&galleries), &classes, &images, tmp.path()).unwrap();
        let html = fs::read_to_string(tmp.path().join("index.html")).unwrap();
        assert_eq!(html.matches("<section").count(), 3);
        assert!(tmp.path().join("prototypes/0/member_1.png").is_file());

        let side = sidecar(tmp.path());
        let d: f64 = side["prototype.0.member.0.distance"].parse().unwrap();
        assert_eq!(d, 1.0 / 3.0);
        let s: f64 = side["prototype.2.member.0.similarity"].parse().unwrap();
        assert_eq!(s, 0.1 + 0.2);

        let before: Vec<Vec<u8>> = ["index.html", "sidecar.txt", "prototypes/0/member_0.png"]
            .iter()
            .map(|f| fs::read(tmp.path().join(f)).unwrap())
            .collect();
        render_report(Report::Galleries(&galleries), &classes, &images, tmp.path()).unwrap();
        for (f, b) in ["index.html", "sidecar.txt", "prototypes/0/member_0.png"]
            .iter()
            .zip(before)
        {
            assert_eq!(fs::read(tmp.path().join(f)).unwrap(), b, "{f}");
        }
    }

    #[test]
    fn scoresheet_report_and_missing_image() {
        let img = RgbImage::new(16, 16);
        let images: HashMap<&str, &RgbImage> = [("t", &img), ("a", &img)].into_iter().collect();
        let sheet = Scoresheet {
            image_id: "t".into(),
            predicted: 1,
            rows: vec![ScoreRow {
                prototype: 4,
                similarity: 0.7,
                weight: 1.1,
                contribution: 0.7 * 1.1,
                bbox: BBox {
                    x0: 0,
                    y0: 0,
                    x1: 8,
                    y1: 8,
                },
                gallery: vec![patch("a", 0.1)],
            }],
            class_totals: vec![-0.2, 0.77],
        };
        let tmp = tempfile::tempdir().unwrap();
        render_report(Report::Scoresheet(&sheet), &[], &images, tmp.path()).unwrap();
        let side = sidecar(tmp.path());
        assert_eq!(
            side["row.0.contribution"].parse::<f64>().unwrap(),
            0.7 * 1.1
        );
        assert_eq!(side["class.1.total"], "0.77");
        assert!(tmp.path().join("prototypes/4/this_patch.png").is_file());

        let none: HashMap<&str, &RgbImage> = HashMap::new();
        assert!(render_report(
            Report::Scoresheet(&sheet),
            &[],
            &none,
            &tmp.path().join("x")
        )
        .is_err());
    }

    #[test]
    fn scan_round_trip() {
        let scan = vec![
            vec![patch("train/a/0.png", 0.123456789)],
            vec![],
            vec![patch("b", f64::MIN_POSITIVE)],
        ];
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("s.scan");
        save_scan(&scan, &path).unwrap();
        assert_eq!(load_scan(&path).unwrap(), scan);
        fs::write(&path, "nonsense").unwrap();
        assert!(load_scan(&path).is_err());
    }
}
