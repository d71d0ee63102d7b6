//! A small interview study written to disk: eight transcripts, one research
//! question, gold topics, and a mock script answering all four strategies.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use thematic::embedding::EmbeddingProviderConfig;
use thematic::workbench::config::{BackendKind, Settings};

pub const FABRICATED: &str = "Our department tripled the open textbook budget in a single semester.";

pub const EVAL_MODELS: [&str; 3] = ["distilbert-base-uncased", "bert-base-uncased", "roberta-large"];

const TRANSCRIPTS: [(&str, &str); 8] = [
    (
        "P01",
        "Interviewer: How do you use open resources in your teaching?\n\
Participant: I build most of my course around open textbooks so students never pay for materials.\n\
Interviewer: What changed for your students?\n\
Participant: They come to class having already read the chapter, because the book is free on day one.",
    ),
    (
        "P02",
        "Interviewer: Tell me about collaboration.\n\
Participant: You can also in your teaching have students connect with people outside the course in various ways.\n\
Participant: Like, maybe some people outside the course are commenting on blogs and students are getting in a conversation around that.",
    ),
    (
        "P03",
        "Interviewer: Do you share what you create?\n\
Participant: I post my slides and assignments under a Creative Commons license so other instructors can adapt them.\n\
Interviewer: Has anyone reused them?\n\
Participant: A colleague in another province remixed my lab manual for her chemistry section.",
    ),
    (
        "P04",
        "Interviewer: What barriers do you face?\n\
Participant: Honestly the biggest barrier is time; finding and vetting open material takes hours I do not have.\n\
Participant: There is also no recognition for this work when it comes to tenure and promotion.",
    ),
    (
        "P05",
        "Interviewer: How does your institution support open practices?\n\
Participant: The library runs a small grant program that pays faculty to adopt or write open textbooks.\n\
Participant: Without that grant I would not have started the project at all.",
    ),
    (
        "P06",
        "Interviewer: How do students contribute?\n\
Participant: My students write chapters for an open anthology that next year's class will read and revise.\n\
Participant: They take the writing more seriously when they know a real audience will see it.",
    ),
    (
        "P07",
        "Interviewer: What about quality concerns?\n\
Participant: Some colleagues assume that free means low quality, so I spend time reviewing the material with peers.\n\
Participant: Peer review inside the discipline makes people trust the resource.",
    ),
    (
        "P08",
        "Interviewer: How did you get started?\n\
Participant: I started after a workshop where a librarian showed us how licensing actually works.\n\
Participant: Understanding licenses made me confident enough to share my own materials.",
    ),
];

pub const QUESTION_ID: &str = "rq1";

pub struct Study {
    pub root: PathBuf,
    pub transcripts: PathBuf,
    pub questions: PathBuf,
    pub gold: PathBuf,
    pub script: PathBuf,
    pub config: PathBuf,
    pub workspace: PathBuf,
}

fn block(label: &str, description: &str, anecdote: &str) -> String {
    format!("TOPIC: {label}\nDESCRIPTION: {description}\nANECDOTE: \"{anecdote}\"\n\n")
}

/// Mock responses keyed on text that only one strategy's prompt contains.
/// The zero-shot entry has no pattern and sits last so it only answers the
/// prompt none of the others match.
pub fn script_json() -> String {
    let few = [
        block(
            "Collaboration",
            "Co-creating resources and connecting with others",
            "You can also in your teaching have students connect with people outside the course in various ways.",
        ),
        block(
            "Sharing materials",
            "Instructors license and share teaching materials for reuse",
            "I post my slides and assignments under a Creative Commons license so other instructors can adapt them.",
        ),
    ]
    .concat();
    let cot = [
        block(
            "Institutional support",
            "Grants from the institution enable adoption",
            "The library runs a small grant program that pays faculty to adopt or write open textbooks.",
        ),
        // Case and punctuation differ from the transcript; still grounded.
        block(
            "Barriers",
            "Time and lack of recognition hold instructors back",
            "honestly, the biggest barrier is time... finding and vetting open material takes hours I do not have",
        ),
    ]
    .concat();
    let rag = [
        block(
            "Student authorship",
            "Students create open content for future classes",
            "My students write chapters for an open anthology that next year's class will read and revise.",
        ),
        block(
            "Quality and peer review",
            "Peer review builds trust in open resources",
            "Peer review inside the discipline makes people trust the resource.",
        ),
    ]
    .concat();
    let zero = [
        block(
            "Cost savings",
            "Open textbooks remove costs for students",
            "I build most of my course around open textbooks so students never pay for materials.",
        ),
        block("Funding growth", "Budgets for open resources increased", FABRICATED),
    ]
    .concat();
    serde_json::to_string_pretty(&serde_json::json!([
        {"match": "Examples:", "response": few},
        {"match": "Steps:", "response": cot},
        {"match": "Retrieved excerpts:", "response": rag},
        {"response": zero},
    ]))
    .unwrap()
}

pub fn gold_json() -> String {
    serde_json::to_string_pretty(&serde_json::json!({
        "question_id": QUESTION_ID,
        "topics": [
            "Collaboration — Co-creating resources and connecting with others",
            "Cost savings — Open textbooks remove costs for students",
            "Sharing materials — Licensing teaching materials so others can reuse them",
            "Barriers — Time and recognition limit open practice",
            "Institutional support — Grants and library programs",
            "Student authorship — Students write open content",
        ]
    }))
    .unwrap()
}

pub fn settings(script: &Path) -> Settings {
    let mut s = Settings::default();
    s.llm.backend = BackendKind::Scripted;
    s.llm.script = Some(script.to_path_buf());
    s.embedding = EmbeddingProviderConfig::deterministic("hash-64", 64, 5);
    s.retrieval.k = 3;
    s.retrieval.chunk_size = 24;
    s.retrieval.chunk_overlap = 4;
    s.evaluation.models = EVAL_MODELS
        .iter()
        .enumerate()
        .map(|(i, id)| EmbeddingProviderConfig::deterministic(*id, 32 + 16 * i, 100 + i as u64))
        .collect();
    s
}

fn config_toml() -> String {
    let mut t = String::from(
        "[llm]\nbackend = \"scripted\"\nscript = \"mock_script.json\"\n\n\
[embedding]\nmodel_id = \"hash-64\"\nkind = \"deterministic-test\"\ndimension = 64\nseed = 5\n\n\
[retrieval]\nk = 3\nchunk_size = 24\nchunk_overlap = 4\n",
    );
    for (i, id) in EVAL_MODELS.iter().enumerate() {
        t.push_str(&format!(
            "\n[[evaluation.models]]\nmodel_id = \"{id}\"\nkind = \"deterministic-test\"\ndimension = {}\nseed = {}\n",
            32 + 16 * i,
            100 + i
        ));
    }
    t
}

pub fn write_study(root: &Path) -> Study {
    let transcripts = root.join("transcripts");
    fs::create_dir_all(&transcripts).unwrap();
    for (id, text) in TRANSCRIPTS {
        fs::write(transcripts.join(format!("{id}.txt")), text).unwrap();
    }
    let questions = root.join("questions.json");
    fs::write(
        &questions,
        serde_json::to_string_pretty(&serde_json::json!([{
            "id": QUESTION_ID,
            "text": "How do instructors engage with open educational practices?",
            "sub_questions": ["What supports or hinders sharing and collaboration?"]
        }]))
        .unwrap(),
    )
    .unwrap();
    let gold = root.join("gold.json");
    fs::write(&gold, gold_json()).unwrap();
    let script = root.join("mock_script.json");
    fs::write(&script, script_json()).unwrap();
    let config = root.join("thematic.toml");
    fs::write(&config, config_toml()).unwrap();
    let workspace = root.join("ws");
    fs::create_dir_all(&workspace).unwrap();
    Study {
        root: root.to_path_buf(),
        transcripts,
        questions,
        gold,
        script,
        config,
        workspace,
    }
}
