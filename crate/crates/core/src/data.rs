//! Datasets, image feature stores and the synthetic shapes benchmark.
//!
//! Dataset files hold one example per line: `image_id<TAB>question<TAB>answer`,
//! tokens space-separated.
//!
//! Feature files come in two encodings:
//!
//! * text: a `d_img=<int>` header line, then `image_id<TAB>v1 v2 … v_d` per
//!   line, reals in shortest round-trip decimal form;
//! * binary: magic `MQAFEAT\0`, `u32` version (1), `u64` d_img, `u64` count,
//!   then `count` ids each as `u32` byte length + UTF-8 bytes, then
//!   `count × d_img` little-endian `f64` values in id-table order.
//!
//! All integers are little-endian. Stores iterate in lexicographic id order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MqaError, Result};
use crate::numerics::Vector;
use crate::vocab::{tokenize, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaExample {
    pub image_id: String,
    pub question: Vec<String>,
    pub answer: Vec<String>,
}

impl QaExample {
    pub fn new(image_id: impl Into<String>, question: &str, answer: &str) -> Self {
        QaExample {
            image_id: image_id.into(),
            question: tokenize(question),
            answer: tokenize(answer),
        }
    }
}

pub fn parse_dataset(text: &str, origin: &str) -> Result<Vec<QaExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| MqaError::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(&format!(
                "expected 3 tab-separated fields (image_id, question, answer), found {}",
                fields.len()
            )));
        }
        let image_id = fields[0].trim();
        if image_id.is_empty() {
            return Err(err("empty image id"));
        }
        let question = tokenize(fields[1]);
        let answer = tokenize(fields[2]);
        if question.is_empty() {
            return Err(err("empty question"));
        }
        if answer.is_empty() {
            return Err(err("empty answer"));
        }
        out.push(QaExample {
            image_id: image_id.to_string(),
            question,
            answer,
        });
    }
    Ok(out)
}

/// Vocabulary over every question and answer token.
pub fn build_vocabulary(examples: &[QaExample], min_count: usize) -> Result<Vocabulary> {
    let corpus: Vec<&[String]> = examples
        .iter()
        .flat_map(|e| [e.question.as_slice(), e.answer.as_slice()])
        .collect();
    Vocabulary::build(&corpus, min_count)
}

pub fn dataset_to_text(examples: &[QaExample]) -> String {
    let mut s = String::new();
    for e in examples {
        s.push_str(&e.image_id);
        s.push('\t');
        s.push_str(&e.question.join(" "));
        s.push('\t');
        s.push_str(&e.answer.join(" "));
        s.push('\n');
    }
    s
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QaExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MqaError::io(path, e))?;
    parse_dataset(&text, &path.display().to_string())
}

pub fn save_dataset(path: impl AsRef<Path>, examples: &[QaExample]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_text(examples)).map_err(|e| MqaError::io(path, e))
}

/// Precomputed, fixed image representations keyed by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureStore {
    d_img: usize,
    vectors: BTreeMap<String, Vector>,
}

const FEATURE_MAGIC: &[u8; 8] = b"MQAFEAT\0";
const FEATURE_VERSION: u32 = 1;

impl ImageFeatureStore {
    pub fn new(d_img: usize) -> Self {
        ImageFeatureStore {
            d_img,
            vectors: BTreeMap::new(),
        }
    }

    pub fn d_img(&self) -> usize {
        self.d_img
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, v: Vector) -> Result<()> {
        if v.len() != self.d_img {
            return Err(MqaError::shape(
                "ImageFeatureStore::insert",
                self.d_img,
                v.len(),
            ));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(MqaError::Config(
                "image feature contains non-finite values".into(),
            ));
        }
        self.vectors.insert(id.into(), v);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        self.vectors
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| MqaError::MissingImage(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.vectors.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("d_img={}\n", self.d_img);
        for (id, v) in &self.vectors {
            s.push_str(id);
            s.push('\t');
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            s.push_str(&vals.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, msg: String| MqaError::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let header = lines
            .next()
            .map(|(_, l)| l.trim())
            .ok_or_else(|| err(1, "missing `d_img=<int>` header".into()))?;
        let d_img =
            parse_feature_header(header).ok_or_else(|| err(1, format!("bad header `{header}`")))?;
        let mut store = ImageFeatureStore::new(d_img);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (id, vals) = line
                .split_once('\t')
                .ok_or_else(|| err(i + 1, "expected `image_id<TAB>values`".into()))?;
            let v: Vector = vals
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(i + 1, e.to_string()))?;
            if v.len() != d_img {
                return Err(err(
                    i + 1,
                    format!("expected {d_img} values, found {}", v.len()),
                ));
            }
            store.insert(id, v).map_err(|e| err(i + 1, e.to_string()))?;
        }
        Ok(store)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d_img as u64).to_le_bytes());
        out.extend_from_slice(&(self.vectors.len() as u64).to_le_bytes());
        for id in self.vectors.keys() {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for v in self.vectors.values() {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != FEATURE_MAGIC {
            return Err(MqaError::Checkpoint("feature file: bad magic".into()));
        }
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(MqaError::Checkpoint(format!(
                "feature file: unsupported version {version}"
            )));
        }
        let d_img = r.u64()? as usize;
        let count = r.u64()? as usize;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|e| MqaError::Checkpoint(format!("feature file: {e}")))?;
            ids.push(id.to_string());
        }
        let mut store = ImageFeatureStore::new(d_img);
        for id in ids {
            let v = (0..d_img).map(|_| r.f64()).collect::<Result<Vector>>()?;
            store.insert(id, v)?;
        }
        if r.pos != bytes.len() {
            return Err(MqaError::Checkpoint("feature file: trailing bytes".into()));
        }
        Ok(store)
    }

    /// Writes text or binary depending on the extension (`.bin` → binary).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = if is_binary_path(path) {
            self.to_binary()
        } else {
            self.to_text().into_bytes()
        };
        fs::write(path, bytes).map_err(|e| MqaError::io(path, e))
    }

    /// Reads either encoding, detected by the magic bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| MqaError::io(path, e))?;
        if bytes.starts_with(FEATURE_MAGIC) {
            return Self::from_binary(&bytes);
        }
        let text = String::from_utf8(bytes).map_err(|e| MqaError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: e.to_string(),
        })?;
        Self::from_text(&text, &path.display().to_string())
    }

    /// Reads only `d_img` from a feature file.
    pub fn peek_dim(path: impl AsRef<Path>) -> Result<usize> {
        use std::io::Read;
        let path = path.as_ref();
        let mut f = fs::File::open(path).map_err(|e| MqaError::io(path, e))?;
        let mut head = [0u8; 28];
        let n = f.read(&mut head).map_err(|e| MqaError::io(path, e))?;
        if head[..n].starts_with(FEATURE_MAGIC) && n >= 20 {
            return Ok(u64::from_le_bytes(head[12..20].try_into().unwrap()) as usize);
        }
        let text = String::from_utf8_lossy(&head[..n]);
        let first = text.lines().next().unwrap_or("");
        parse_feature_header(first.trim()).ok_or_else(|| MqaError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "bad feature header".into(),
        })
    }
}

fn parse_feature_header(line: &str) -> Option<usize> {
    line.strip_prefix("d_img=")?.trim().parse().ok()
}

fn is_binary_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| MqaError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

// ---------------------------------------------------------------------------
// synthetic shapes benchmark

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const POSITIONS: [&str; 4] = ["left", "right", "top", "bottom"];

const SLOT_WIDTH: usize = SHAPES.len() + COLORS.len() + POSITIONS.len();
/// Width of a synthetic scene's feature vector.
pub const SYNTHETIC_D_IMG: usize = SHAPES.len() * SLOT_WIDTH;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub position: usize,
}

/// A scene of 1–3 objects with pairwise distinct shapes, kept sorted by shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticScene {
    pub image_id: String,
    pub objects: Vec<SceneObject>,
}

impl SyntheticScene {
    pub fn new(image_id: impl Into<String>, mut objects: Vec<SceneObject>) -> Result<Self> {
        if objects.is_empty() || objects.len() > SHAPES.len() {
            return Err(MqaError::Config(format!(
                "scene needs 1-3 objects, got {}",
                objects.len()
            )));
        }
        objects.sort();
        for w in objects.windows(2) {
            if w[0].shape == w[1].shape {
                return Err(MqaError::Config("two objects share a shape".into()));
            }
        }
        for o in &objects {
            if o.shape >= SHAPES.len() || o.color >= COLORS.len() || o.position >= POSITIONS.len() {
                return Err(MqaError::Config(format!("attribute out of range: {o:?}")));
            }
        }
        Ok(SyntheticScene {
            image_id: image_id.into(),
            objects,
        })
    }

    pub fn find(&self, shape: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.shape == shape)
    }

    /// Three 11-wide blocks (shape ⊕ color ⊕ position one-hots), one per
    /// object; an object occupies the block indexed by its shape, absent
    /// shapes leave their block zero.
    pub fn features(&self) -> Vector {
        let mut v = vec![0.0; SYNTHETIC_D_IMG];
        for o in &self.objects {
            let base = o.shape * SLOT_WIDTH;
            v[base + o.shape] = 1.0;
            v[base + SHAPES.len() + o.color] = 1.0;
            v[base + SHAPES.len() + COLORS.len() + o.position] = 1.0;
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuestionKind {
    Color(usize),
    Position(usize),
    Exists(usize),
    Count,
}

impl QuestionKind {
    pub fn tokens(self) -> Vec<String> {
        let s = match self {
            QuestionKind::Color(sh) => format!("what color is the {} ?", SHAPES[sh]),
            QuestionKind::Position(sh) => format!("where is the {} ?", SHAPES[sh]),
            QuestionKind::Exists(sh) => format!("is there a {} ?", SHAPES[sh]),
            QuestionKind::Count => "how many objects are there ?".to_string(),
        };
        tokenize(&s)
    }

    pub fn parse<S: AsRef<str>>(question: &[S]) -> Result<Self> {
        let q: Vec<&str> = question.iter().map(AsRef::as_ref).collect();
        let shape = |t: &str| SHAPES.iter().position(|&s| s == t);
        let unknown = || MqaError::UnknownTemplate(q.join(" "));
        match q.as_slice() {
            ["what", "color", "is", "the", s, "?"] => {
                shape(s).map(QuestionKind::Color).ok_or_else(unknown)
            }
            ["where", "is", "the", s, "?"] => {
                shape(s).map(QuestionKind::Position).ok_or_else(unknown)
            }
            ["is", "there", "a", s, "?"] => shape(s).map(QuestionKind::Exists).ok_or_else(unknown),
            ["how", "many", "objects", "are", "there", "?"] => Ok(QuestionKind::Count),
            _ => Err(unknown()),
        }
    }
}

/// Ground-truth answer read off the scene.
pub fn oracle_answer<S: AsRef<str>>(scene: &SyntheticScene, question: &[S]) -> Result<Vec<String>> {
    let kind = QuestionKind::parse(question)?;
    let absent =
        |sh: usize| MqaError::Unanswerable(format!("no {} in {}", SHAPES[sh], scene.image_id));
    let tok = match kind {
        QuestionKind::Color(sh) => {
            COLORS[scene.find(sh).ok_or_else(|| absent(sh))?.color].to_string()
        }
        QuestionKind::Position(sh) => {
            POSITIONS[scene.find(sh).ok_or_else(|| absent(sh))?.position].to_string()
        }
        QuestionKind::Exists(sh) => if scene.find(sh).is_some() {
            "yes"
        } else {
            "no"
        }
        .to_string(),
        QuestionKind::Count => scene.objects.len().to_string(),
    };
    Ok(vec![tok])
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Examples grouped by image, images in generation order.
    pub examples: Vec<QaExample>,
    pub features: ImageFeatureStore,
    pub scenes: Vec<SyntheticScene>,
}

/// Examples split by image so no image appears in two splits.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<QaExample>,
    pub valid: Vec<QaExample>,
    pub test: Vec<QaExample>,
}

impl SyntheticData {
    /// First `n_train` images go to train, the next `n_valid` to valid, the
    /// rest to test.
    pub fn split(&self, n_train: usize, n_valid: usize) -> Split {
        let mut which = BTreeMap::new();
        for (i, s) in self.scenes.iter().enumerate() {
            let part = if i < n_train {
                0
            } else if i < n_train + n_valid {
                1
            } else {
                2
            };
            which.insert(s.image_id.as_str(), part);
        }
        let mut split = Split {
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
        };
        for e in &self.examples {
            match which[e.image_id.as_str()] {
                0 => split.train.push(e.clone()),
                1 => split.valid.push(e.clone()),
                _ => split.test.push(e.clone()),
            }
        }
        split
    }

    /// 80/10/10 by image.
    pub fn split_default(&self) -> Split {
        let n = self.scenes.len();
        let n_valid = n / 10;
        let n_test = n / 10;
        self.split(n - n_valid - n_test, n_valid)
    }
}

pub fn image_id(i: usize) -> String {
    format!("img{i:05}")
}

pub fn random_scene<R: Rng>(rng: &mut R, id: String) -> SyntheticScene {
    let count = rng.gen_range(1..=SHAPES.len());
    let mut shapes: Vec<usize> = (0..SHAPES.len()).collect();
    shapes.shuffle(rng);
    let objects = shapes[..count]
        .iter()
        .map(|&shape| SceneObject {
            shape,
            color: rng.gen_range(0..COLORS.len()),
            position: rng.gen_range(0..POSITIONS.len()),
        })
        .collect();
    SyntheticScene::new(id, objects).expect("generated scene is valid")
}

fn random_question<R: Rng>(rng: &mut R, scene: &SyntheticScene) -> QuestionKind {
    let present = |rng: &mut R| scene.objects[rng.gen_range(0..scene.objects.len())].shape;
    match rng.gen_range(0..4) {
        0 => QuestionKind::Color(present(rng)),
        1 => QuestionKind::Position(present(rng)),
        2 => QuestionKind::Exists(rng.gen_range(0..SHAPES.len())),
        _ => QuestionKind::Count,
    }
}

/// Seeded scenes with `questions_per_image` distinct template questions each,
/// answered by [`oracle_answer`].
pub fn generate_synthetic(
    n_images: usize,
    questions_per_image: usize,
    seed: u64,
) -> Result<SyntheticData> {
    if n_images == 0 {
        return Err(MqaError::Config("n_images must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = ImageFeatureStore::new(SYNTHETIC_D_IMG);
    let mut scenes = Vec::with_capacity(n_images);
    let mut examples = Vec::with_capacity(n_images * questions_per_image);
    for i in 0..n_images {
        let scene = random_scene(&mut rng, image_id(i));
        features.insert(scene.image_id.clone(), scene.features())?;
        let mut asked: Vec<QuestionKind> = Vec::with_capacity(questions_per_image);
        for _ in 0..questions_per_image {
            let mut q = random_question(&mut rng, &scene);
            // every scene admits at least 6 distinct questions; past that, repeats are fine
            for _ in 0..32 {
                if !asked.contains(&q) {
                    break;
                }
                q = random_question(&mut rng, &scene);
            }
            asked.push(q);
            let question = q.tokens();
            let answer = oracle_answer(&scene, &question)?;
            examples.push(QaExample {
                image_id: scene.image_id.clone(),
                question,
                answer,
            });
        }
        scenes.push(scene);
    }
    Ok(SyntheticData {
        examples,
        features,
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn obj(shape: usize, color: usize, position: usize) -> SceneObject {
        SceneObject {
            shape,
            color,
            position,
        }
    }

    #[test]
    fn dataset_round_trip() {
        let data = generate_synthetic(5, 3, 1).unwrap();
        let text = dataset_to_text(&data.examples);
        assert_eq!(parse_dataset(&text, "mem").unwrap(), data.examples);
        assert!(parse_dataset("", "mem").unwrap().is_empty());
    }

    #[test]
    fn dataset_errors_carry_line_numbers() {
        let text = "img0\twhat ?\tred\nimg1\twhere ?\n";
        match parse_dataset(text, "f.tsv") {
            Err(MqaError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_dataset("img0\t \tred\n", "f.tsv") {
            Err(MqaError::Parse { line: 1, msg, .. }) => assert!(msg.contains("question")),
            other => panic!("{other:?}"),
        }
        match parse_dataset("img0\tq ?\t  \n", "f.tsv") {
            Err(MqaError::Parse { line: 1, msg, .. }) => assert!(msg.contains("answer")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn feature_store_encodings_round_trip() {
        let mut s = ImageFeatureStore::new(3);
        s.insert("b", vec![0.1, -2.5e-7, 1.0 / 3.0]).unwrap();
        s.insert("a", vec![f64::MAX, 0.0, -0.0]).unwrap();
        assert_eq!(
            ImageFeatureStore::from_text(&s.to_text(), "mem").unwrap(),
            s
        );
        let bin = s.to_binary();
        assert_eq!(
            ImageFeatureStore::from_binary(&bin).unwrap().to_binary(),
            bin
        );
        assert!(ImageFeatureStore::from_binary(&bin[..bin.len() - 1]).is_err());
        assert!(s.insert("c", vec![1.0]).is_err());
        assert!(matches!(s.get("zz"), Err(MqaError::MissingImage(_))));
    }

    #[test]
    fn feature_text_errors() {
        assert!(ImageFeatureStore::from_text("dim=3\n", "f").is_err());
        let e = ImageFeatureStore::from_text("d_img=2\na\t1 2\nb\t1\n", "f").unwrap_err();
        assert!(matches!(e, MqaError::Parse { line: 3, .. }));
    }

    #[test]
    fn oracle_examples() {
        let s = SyntheticScene::new("x", vec![obj(0, 0, 0)]).unwrap();
        assert_eq!(
            oracle_answer(&s, &tokenize("what color is the circle ?")).unwrap(),
            ["red"]
        );
        let s = SyntheticScene::new("x", vec![obj(1, 2, 2)]).unwrap();
        assert_eq!(
            oracle_answer(&s, &tokenize("where is the square ?")).unwrap(),
            ["top"]
        );
        assert_eq!(
            oracle_answer(&s, &tokenize("is there a triangle ?")).unwrap(),
            ["no"]
        );
        assert_eq!(
            oracle_answer(&s, &tokenize("is there a square ?")).unwrap(),
            ["yes"]
        );
        let s = SyntheticScene::new("x", vec![obj(2, 1, 3), obj(0, 3, 1)]).unwrap();
        assert_eq!(
            oracle_answer(&s, &tokenize("how many objects are there ?")).unwrap(),
            ["2"]
        );
        assert!(matches!(
            oracle_answer(&s, &tokenize("what shape is it ?")),
            Err(MqaError::UnknownTemplate(_))
        ));
        assert!(matches!(
            oracle_answer(&s, &tokenize("what color is the square ?")),
            Err(MqaError::Unanswerable(_))
        ));
    }

    #[test]
    fn scene_validation() {
        assert!(SyntheticScene::new("x", vec![]).is_err());
        assert!(SyntheticScene::new("x", vec![obj(0, 0, 0), obj(0, 1, 1)]).is_err());
        assert!(SyntheticScene::new("x", vec![obj(0, 4, 0)]).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_self_consistent() {
        let a = generate_synthetic(40, 3, 9).unwrap();
        let b = generate_synthetic(40, 3, 9).unwrap();
        assert_eq!(dataset_to_text(&a.examples), dataset_to_text(&b.examples));
        assert_eq!(a.features.to_binary(), b.features.to_binary());
        assert_eq!(a.examples.len(), 120);
        assert_eq!(a.features.d_img(), 33);
        for e in &a.examples {
            let scene = a.scenes.iter().find(|s| s.image_id == e.image_id).unwrap();
            assert_eq!(oracle_answer(scene, &e.question).unwrap(), e.answer);
            assert_eq!(
                a.features.get(&e.image_id).unwrap(),
                scene.features().as_slice()
            );
            // absent shapes only appear in yes/no questions
            match QuestionKind::parse(&e.question).unwrap() {
                QuestionKind::Color(sh) | QuestionKind::Position(sh) => {
                    assert!(scene.find(sh).is_some())
                }
                _ => {}
            }
        }
        assert!(generate_synthetic(0, 3, 9).is_err());
    }

    #[test]
    fn feature_encoding_is_injective() {
        let mut all_single = HashSet::new();
        for shape in 0..3 {
            for color in 0..4 {
                for position in 0..4 {
                    let s = SyntheticScene::new("x", vec![obj(shape, color, position)]).unwrap();
                    let key: Vec<u64> = s.features().iter().map(|x| x.to_bits()).collect();
                    assert!(all_single.insert(key));
                }
            }
        }
        assert_eq!(all_single.len(), 48);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut seen: BTreeMap<Vec<u64>, Vec<SceneObject>> = BTreeMap::new();
        for _ in 0..5000 {
            let s = random_scene(&mut rng, "x".into());
            let key: Vec<u64> = s.features().iter().map(|x| x.to_bits()).collect();
            if let Some(prev) = seen.insert(key, s.objects.clone()) {
                assert_eq!(prev, s.objects);
            }
        }
    }

    #[test]
    fn split_keeps_images_disjoint() {
        let data = generate_synthetic(100, 3, 2).unwrap();
        let split = data.split_default();
        let ids = |v: &[QaExample]| v.iter().map(|e| e.image_id.clone()).collect::<HashSet<_>>();
        let (tr, va, te) = (ids(&split.train), ids(&split.valid), ids(&split.test));
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        assert_eq!(
            split.train.len() + split.valid.len() + split.test.len(),
            300
        );
    }

    #[test]
    fn color_answers_are_uniform() {
        // Each color count over n color questions is Binomial(n, 1/4).
        let data = generate_synthetic(14_000, 3, 2024).unwrap();
        let colors: Vec<&str> = data
            .examples
            .iter()
            .filter(|e| e.question[1] == "color")
            .map(|e| e.answer[0].as_str())
            .take(10_000)
            .collect();
        assert_eq!(colors.len(), 10_000);
        let n = colors.len() as f64;
        let sigma = (n * 0.25 * 0.75).sqrt();
        for c in COLORS {
            let k = colors.iter().filter(|&&x| x == c).count() as f64;
            assert!((k - 0.25 * n).abs() <= 3.0 * sigma, "{c}: {k}");
        }
    }
}
