use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use super::chair::{extract_objects, ObjectLexicon};
use super::{parse_label, EvalError};

/// Suffix every MME question carries.
pub const MME_SUFFIX: &str = "Please answer yes or no.";

const POPE_SPLITS: [&str; 3] = ["random", "popular", "adversarial"];
const IMAGE_EXTS: [&str; 5] = ["jpg", "png", "jpeg", "JPG", "PNG"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopeRecord {
    pub id: String,
    pub question: String,
    pub label: bool,
    pub image: PathBuf,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MmeRecord {
    pub category: String,
    /// Image file stem, the pairing key.
    pub image_key: String,
    pub image: PathBuf,
    pub question: String,
    pub label: bool,
}

/// An image to caption with its ground-truth objects.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChairTask {
    pub id: u64,
    pub image: PathBuf,
    pub gt: BTreeSet<String>,
}

fn read(path: &Path) -> Result<String, EvalError> {
    fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> EvalError {
    EvalError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn resolve(root: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn check_images<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<(), EvalError> {
    let missing: Vec<_> = paths.into_iter().filter(|p| !p.is_file()).collect();
    match missing.first() {
        None => Ok(()),
        Some(first) => Err(EvalError::Dataset(format!(
            "{} image(s) not found, first: {}",
            missing.len(),
            first.display()
        ))),
    }
}

fn str_field<'a>(v: &'a Value, keys: &[&str]) -> Option<&'a str> {
    keys.iter().find_map(|k| v.get(*k).and_then(Value::as_str))
}

/// Newline-delimited `{"question" | "text", "label", "image"}` objects.
/// Relative image paths resolve against `image_root` (default: the file's
/// directory). The split comes from a `split` field, else from the file name.
pub fn load_pope(path: &Path, image_root: Option<&Path>) -> Result<Vec<PopeRecord>, EvalError> {
    let text = read(path)?;
    let root = image_root
        .map(Path::to_path_buf)
        .unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).to_path_buf());
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_lowercase();
    let default_split = POPE_SPLITS
        .iter()
        .find(|s| stem.contains(*s))
        .copied()
        .unwrap_or("all");
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        let question = str_field(&v, &["question", "text"])
            .ok_or_else(|| parse_err(path, lineno, "missing question"))?;
        let label = str_field(&v, &["label", "answer"])
            .and_then(parse_label)
            .ok_or_else(|| parse_err(path, lineno, "label must be \"yes\" or \"no\""))?;
        let image = str_field(&v, &["image"]).ok_or_else(|| parse_err(path, lineno, "missing image"))?;
        let id = match v.get("question_id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => out.len().to_string(),
        };
        out.push(PopeRecord {
            id,
            question: question.to_string(),
            label,
            image: resolve(&root, image),
            split: str_field(&v, &["split"]).unwrap_or(default_split).to_string(),
        });
    }
    if out.is_empty() {
        return Err(EvalError::Dataset(format!("{} has no records", path.display())));
    }
    check_images(out.iter().map(|r| &r.image))?;
    Ok(out)
}

fn load_json(path: &Path) -> Result<Value, EvalError> {
    serde_json::from_str(&read(path)?).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

/// Either a bare array or an object with an `annotations` array.
fn caption_entries(path: &Path, v: &Value) -> Result<Vec<(u64, String)>, EvalError> {
    let list = match v {
        Value::Array(a) => a,
        _ => v
            .get("annotations")
            .and_then(Value::as_array)
            .ok_or_else(|| parse_err(path, 0, "expected an array of captions"))?,
    };
    list.iter()
        .map(|e| {
            let id = e.get("image_id").and_then(Value::as_u64);
            let cap = e.get("caption").and_then(Value::as_str);
            match (id, cap) {
                (Some(id), Some(cap)) => Ok((id, cap.to_string())),
                _ => Err(parse_err(path, 0, "caption entries need image_id and caption")),
            }
        })
        .collect()
}

/// Generated captions keyed by image id; a JSON array or JSON lines.
pub fn load_generated_captions(path: &Path) -> Result<BTreeMap<u64, String>, EvalError> {
    let text = read(path)?;
    let entries = match serde_json::from_str::<Value>(&text) {
        Ok(v) => caption_entries(path, &v)?,
        Err(_) => {
            let mut all = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let v: Value = serde_json::from_str(line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
                all.extend(caption_entries(path, &Value::Array(vec![v]))?);
            }
            all
        }
    };
    Ok(entries.into_iter().collect())
}

/// COCO instance annotations plus ground-truth captions. The object set of
/// an image is its annotated categories together with every object its
/// reference captions mention. Images come from the annotation file's
/// `images` list, sorted by id.
pub fn load_chair(
    annotations: &Path,
    captions: Option<&Path>,
    image_root: Option<&Path>,
    lexicon: &ObjectLexicon,
) -> Result<Vec<ChairTask>, EvalError> {
    let ann = load_json(annotations)?;
    let root = image_root
        .map(Path::to_path_buf)
        .unwrap_or_else(|| annotations.parent().unwrap_or(Path::new(".")).to_path_buf());
    let mut categories = BTreeMap::new();
    for c in ann.get("categories").and_then(Value::as_array).into_iter().flatten() {
        let (Some(id), Some(name)) = (c.get("id").and_then(Value::as_u64), c.get("name").and_then(Value::as_str))
        else {
            return Err(parse_err(annotations, 0, "categories need id and name"));
        };
        let canonical = lexicon
            .canonical(name)
            .ok_or_else(|| EvalError::Dataset(format!("category {name:?} is not in the lexicon")))?;
        categories.insert(id, canonical.to_string());
    }
    let mut tasks: BTreeMap<u64, ChairTask> = BTreeMap::new();
    let images = ann
        .get("images")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(annotations, 0, "missing images array"))?;
    for im in images {
        let (Some(id), Some(file)) = (im.get("id").and_then(Value::as_u64), im.get("file_name").and_then(Value::as_str))
        else {
            return Err(parse_err(annotations, 0, "images need id and file_name"));
        };
        tasks.insert(
            id,
            ChairTask {
                id,
                image: resolve(&root, file),
                gt: BTreeSet::new(),
            },
        );
    }
    for a in ann.get("annotations").and_then(Value::as_array).into_iter().flatten() {
        let image_id = a.get("image_id").and_then(Value::as_u64);
        let cat = a.get("category_id").and_then(Value::as_u64);
        let (Some(image_id), Some(cat)) = (image_id, cat) else {
            return Err(parse_err(annotations, 0, "annotations need image_id and category_id"));
        };
        let name = categories
            .get(&cat)
            .ok_or_else(|| EvalError::Dataset(format!("unknown category_id {cat}")))?;
        if let Some(t) = tasks.get_mut(&image_id) {
            t.gt.insert(name.clone());
        }
    }
    if let Some(captions) = captions {
        for (id, cap) in caption_entries(captions, &load_json(captions)?)? {
            if let Some(t) = tasks.get_mut(&id) {
                t.gt.extend(extract_objects(&cap, lexicon));
            }
        }
    }
    if tasks.is_empty() {
        return Err(EvalError::Dataset(format!("{} lists no images", annotations.display())));
    }
    Ok(tasks.into_values().collect())
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let rd = fs::read_dir(dir).map_err(|source| EvalError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut v: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
    v.sort();
    Ok(v)
}

/// The public MME layout: one folder per category holding `<stem>.txt`
/// question files of two `question<TAB>Yes|No` lines next to the image, or
/// `images/` and `questions_answers_YN/` subfolders.
pub fn load_mme(root: &Path) -> Result<Vec<MmeRecord>, EvalError> {
    let mut out = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let category = dir.file_name().and_then(|s| s.to_str()).unwrap_or("").to_string();
        let qa = dir.join("questions_answers_YN");
        let (qdir, idir) = if qa.is_dir() { (qa, dir.join("images")) } else { (dir.clone(), dir.clone()) };
        for file in sorted_entries(&qdir)? {
            if file.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
            let image = find_image(&idir, &stem)
                .ok_or_else(|| EvalError::Dataset(format!("no image for {}", file.display())))?;
            let text = read(&file)?;
            let mut n = 0;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let (q, a) = line
                    .rsplit_once('\t')
                    .ok_or_else(|| parse_err(&file, i + 1, "expected question<TAB>answer"))?;
                let label = parse_label(a).ok_or_else(|| parse_err(&file, i + 1, "answer must be Yes or No"))?;
                let mut question = q.trim().to_string();
                if !question.ends_with(MME_SUFFIX) {
                    question = format!("{question} {MME_SUFFIX}");
                }
                out.push(MmeRecord {
                    category: category.clone(),
                    image_key: stem.clone(),
                    image: image.clone(),
                    question,
                    label,
                });
                n += 1;
            }
            if n != 2 {
                return Err(EvalError::MalformedCategory {
                    category: category.clone(),
                    image: stem,
                    count: n,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(EvalError::Dataset(format!("no MME questions under {}", root.display())));
    }
    Ok(out)
}
