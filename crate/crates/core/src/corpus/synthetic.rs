use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{IntentLabel, MessageReplyPair};
use crate::error::{contract, Result};
use crate::rng::Rng;

/// A reply text with its sampling weight inside a family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub text: String,
    pub weight: f64,
}

/// A reply intent: interchangeable surface forms of one communicative act.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplyFamily {
    pub name: String,
    pub variants: Vec<Variant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyWeight {
    pub family: String,
    pub weight: f64,
}

/// One message intent. Its reply families double as the compatibility table
/// used by the defect proxy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentTemplate {
    pub name: String,
    pub messages: Vec<String>,
    pub replies: Vec<FamilyWeight>,
    /// Slot fillers local to this intent; they shadow the global ones.
    #[serde(default)]
    pub slots: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Listed in popularity order; intent `i` gets weight `1 / (i+1)^s`.
    pub intents: Vec<IntentTemplate>,
    pub families: Vec<ReplyFamily>,
    pub slots: BTreeMap<String, Vec<String>>,
    pub zipf_exponent: f64,
    pub n_pairs: usize,
    pub seed: u64,
    pub max_len: usize,
    pub min_intents: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        desk_config()
    }
}

impl SyntheticConfig {
    pub fn family(&self, name: &str) -> Option<&ReplyFamily> {
        self.families.iter().find(|f| f.name == name)
    }

    pub fn intent(&self, name: &str) -> Option<&IntentTemplate> {
        self.intents.iter().find(|i| i.name == name)
    }

    /// Reply families acceptable for each message intent.
    pub fn compatibility(&self) -> BTreeMap<String, Vec<String>> {
        self.intents
            .iter()
            .map(|i| {
                let fams = i.replies.iter().map(|f| f.family.clone()).collect();
                (i.name.clone(), fams)
            })
            .collect()
    }

    pub fn intent_weights(&self) -> Vec<f64> {
        (0..self.intents.len())
            .map(|r| 1.0 / libm::pow((r + 1) as f64, self.zipf_exponent))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.intents.len() < self.min_intents {
            return Err(contract(format!(
                "synthetic config needs at least {} intents, has {}",
                self.min_intents,
                self.intents.len()
            )));
        }
        for intent in &self.intents {
            if intent.messages.is_empty() {
                return Err(contract(format!("intent {} has no messages", intent.name)));
            }
            let mut names: Vec<&str> = intent.replies.iter().map(|f| f.family.as_str()).collect();
            names.sort_unstable();
            names.dedup();
            if names.len() < 2 {
                return Err(contract(format!(
                    "intent {} needs at least two distinct reply families",
                    intent.name
                )));
            }
            for fw in &intent.replies {
                let fam = self.family(&fw.family).ok_or_else(|| {
                    contract(format!("intent {} uses unknown family {}", intent.name, fw.family))
                })?;
                if fam.variants.is_empty() {
                    return Err(contract(format!("family {} has no variants", fam.name)));
                }
            }
        }
        Ok(())
    }
}

fn slot_names(template: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                out.push(&after[..close]);
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    out
}

fn fill(template: &str, values: &BTreeMap<&str, &str>) -> String {
    let mut s = template.to_string();
    for (k, v) in values {
        s = s.replace(&format!("{{{k}}}"), v);
    }
    s
}

/// Samples `n_pairs` labelled pairs. Slots shared by message and reply
/// templates receive the same filler.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<MessageReplyPair>> {
    if config.n_pairs == 0 {
        return Err(contract("n_pairs must be positive"));
    }
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let intent_w = config.intent_weights();
    let mut out = Vec::with_capacity(config.n_pairs);
    let mut attempts = 0usize;
    while out.len() < config.n_pairs {
        attempts += 1;
        if attempts > config.n_pairs * 10 + 100 {
            return Err(contract("templates keep exceeding max_len"));
        }
        let intent = &config.intents[rng.weighted(&intent_w)];
        let msg_t = &intent.messages[rng.below(intent.messages.len())];
        let fam_w: Vec<f64> = intent.replies.iter().map(|f| f.weight).collect();
        let fam_name = &intent.replies[rng.weighted(&fam_w)].family;
        let fam = config.family(fam_name).expect("validated");
        let var_w: Vec<f64> = fam.variants.iter().map(|v| v.weight).collect();
        let reply_t = &fam.variants[rng.weighted(&var_w)].text;

        let mut values: BTreeMap<&str, &str> = BTreeMap::new();
        for name in slot_names(msg_t).into_iter().chain(slot_names(reply_t)) {
            if values.contains_key(name) {
                continue;
            }
            let fillers = intent
                .slots
                .get(name)
                .or_else(|| config.slots.get(name))
                .ok_or_else(|| contract(format!("no fillers for slot {{{name}}}")))?;
            if fillers.is_empty() {
                return Err(contract(format!("no fillers for slot {{{name}}}")));
            }
            values.insert(name, &fillers[rng.below(fillers.len())]);
        }
        let message = fill(msg_t, &values);
        let reply = fill(reply_t, &values);
        let label = IntentLabel {
            message: intent.name.clone(),
            reply: fam.name.clone(),
        };
        if let Some(pair) =
            MessageReplyPair::from_text(&message, &reply, Some(label), config.max_len)
        {
            out.push(pair);
        }
    }
    Ok(out)
}

fn fam(name: &str, variants: &[(&str, f64)]) -> ReplyFamily {
    ReplyFamily {
        name: name.into(),
        variants: variants
            .iter()
            .map(|(t, w)| Variant {
                text: (*t).into(),
                weight: *w,
            })
            .collect(),
    }
}

fn intent(name: &str, messages: &[&str], replies: &[(&str, f64)]) -> IntentTemplate {
    IntentTemplate {
        name: name.into(),
        messages: messages.iter().map(|m| (*m).into()).collect(),
        replies: replies
            .iter()
            .map(|(f, w)| FamilyWeight {
                family: (*f).into(),
                weight: *w,
            })
            .collect(),
        slots: BTreeMap::new(),
    }
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| (*s).into()).collect()
}

/// Desk-scale default: twelve message intents over shared reply families.
pub fn desk_config() -> SyntheticConfig {
    let intents = alloc::vec![
        intent(
            "lunch-invite",
            &[
                "Want to meet up for lunch?",
                "Lunch today?",
                "Do you want to grab lunch?",
                "Lunch at {time}?",
                "Want to get lunch at {place}?",
                "Are you free for lunch {day}?",
                "How about lunch at {place} at {time}?",
                "Hungry? Let's get lunch.",
            ],
            &[("accept", 0.4), ("decline", 0.25), ("ask-time", 0.2), ("ask-where", 0.15)],
        ),
        intent(
            "thanks",
            &[
                "Thanks for your help!",
                "Thank you so much",
                "Thanks for the {favor}!",
                "Really appreciate the {favor}.",
                "Thanks again for {day}",
                "Thank you for everything",
            ],
            &[("welcome", 0.55), ("glad-to-help", 0.3), ("any-time-again", 0.15)],
        ),
        intent(
            "how-are-you",
            &[
                "How are you?",
                "How's it going?",
                "Hey, how are you doing?",
                "How have you been?",
                "How was your {day}?",
                "What's up?",
            ],
            &[("doing-well", 0.5), ("not-great", 0.2), ("ask-back", 0.3)],
        ),
        intent(
            "good-news",
            &[
                "I got the job!",
                "I passed my {event}!",
                "We won the {event}!",
                "Guess what, I got promoted!",
                "My {event} went really well",
                "We are engaged!",
            ],
            &[("congrats", 0.55), ("excited", 0.25), ("ask-details", 0.2)],
        ),
        intent(
            "running-late",
            &[
                "I'm running late",
                "Running {minutes} minutes late, sorry",
                "Stuck in traffic, be there in {minutes}",
                "Sorry, I'll be a bit late",
                "Be there in {minutes} minutes",
                "Missed the bus, running late",
            ],
            &[("no-worries", 0.45), ("ack", 0.35), ("ask-eta", 0.2)],
        ),
        intent(
            "task-request",
            &[
                "Can you send me the {thing}?",
                "Please review the {thing}",
                "Could you update the {thing} by {day}?",
                "Can you take a look at the {thing}?",
                "Need the {thing} asap",
                "Can you share the {thing} with the team?",
            ],
            &[("will-do", 0.5), ("ask-deadline", 0.25), ("busy", 0.25)],
        ),
        intent(
            "bad-news",
            &[
                "I'm sick today",
                "I missed my flight",
                "My car broke down",
                "I didn't get the job",
                "I failed my {event}",
                "Feeling really down today",
            ],
            &[("sympathy", 0.5), ("offer-help", 0.3), ("ask-details", 0.2)],
        ),
        intent(
            "call-request",
            &[
                "Can you call me?",
                "Call me when you can",
                "Are you free to talk?",
                "Can we talk {day}?",
                "Give me a call at {time}",
                "Got a minute to chat?",
            ],
            &[("accept", 0.35), ("call-later", 0.4), ("busy", 0.25)],
        ),
        intent(
            "meeting-confirm",
            &[
                "Are we still on for {day}?",
                "Is the meeting still at {time}?",
                "Still good for {time} {day}?",
                "Confirming our meeting {day}",
                "Are we meeting at {place}?",
            ],
            &[("confirm", 0.5), ("reschedule", 0.3), ("ask-time", 0.2)],
        ),
        intent(
            "joke",
            &[
                "Haha did you see that video?",
                "Look at this meme",
                "This is hilarious",
                "You have to watch this",
                "lol check this out",
            ],
            &[("laugh", 0.6), ("ask-what", 0.2), ("excited", 0.2)],
        ),
        intent(
            "goodnight",
            &[
                "Goodnight!",
                "Going to bed now",
                "Heading to sleep, night!",
                "Night night",
                "Talk tomorrow, going to sleep",
            ],
            &[("bye", 0.6), ("love", 0.25), ("ack", 0.15)],
        ),
        intent(
            "where-are-you",
            &[
                "Where are you?",
                "Are you here yet?",
                "Where are you now?",
                "I'm at {place}, where are you?",
                "Almost there?",
            ],
            &[("on-my-way", 0.55), ("here", 0.25), ("ask-eta", 0.2)],
        ),
    ];

    let families = alloc::vec![
        fam("accept", &[
            ("Sure!", 3.0), ("Sure.", 2.0), ("Sure", 1.5), ("Sure thing!", 1.5),
            ("Sounds good!", 2.0), ("Sounds good.", 1.5), ("Sounds great!", 1.0),
            ("Yes, sounds good.", 1.0), ("Okay, sure.", 1.0), ("Yeah sure", 1.0),
            ("Of course!", 1.0), ("Sure, see you at {time}!", 0.8), ("Sure, {place} works.", 0.6),
            ("Yes, {time} works for me.", 0.6), ("Sure, {day} works!", 0.6), ("Sounds good, see you at {place}.", 0.6),
        ]),
        fam("decline", &[
            ("Sorry, I can't.", 3.0), ("Sorry I can't", 2.0), ("Sorry, I can't make it.", 1.5),
            ("I can't today.", 1.0), ("Not today, sorry.", 1.0), ("Can't today, sorry!", 1.0),
            ("Maybe another time.", 1.0), ("Sorry, I have plans {day}.", 0.6),
            ("I'm not free at {time}, sorry.", 0.6), ("I'm busy {day}, sorry.", 0.6),
        ]),
        fam("ask-time", &[
            ("What time?", 3.0), ("What time?!", 0.5), ("What time works for you?", 1.5),
            ("When?", 1.5), ("At what time?", 1.0), ("What time were you thinking?", 1.0),
            ("What time is good?", 1.0), ("What time on {day}?", 0.6),
        ]),
        fam("ask-where", &[
            ("Where?", 2.0), ("Where should we meet?", 2.0), ("Where do you want to go?", 1.5),
            ("Which place?", 1.0), ("Where at?", 1.0), ("How about {place}?", 0.8), ("Want to try {place}?", 0.6),
        ]),
        fam("welcome", &[
            ("You're welcome!", 3.0), ("You're welcome.", 2.0), ("You are welcome!", 1.0),
            ("No problem!", 2.0), ("No problem.", 1.5), ("No prob!", 0.8), ("Np!", 0.5), ("You're welcome, enjoy the {favor}!", 0.5),
        ]),
        fam("glad-to-help", &[
            ("Glad I could help!", 2.0), ("Happy to help!", 2.0), ("Glad to help.", 1.5),
            ("My pleasure!", 1.5), ("Happy to help anytime.", 1.0), ("Glad you liked the {favor}!", 0.6),
        ]),
        fam("any-time-again", &[
            ("Anytime!", 2.0), ("Any time!", 1.0), ("Anytime, just ask.", 1.0),
            ("Let me know if you need anything else.", 1.5), ("Just let me know if you need more.", 1.0),
        ]),
        fam("doing-well", &[
            ("I'm good, thanks!", 2.5), ("I am good, thanks!", 1.0), ("Doing well, thanks.", 2.0),
            ("Pretty good!", 1.5), ("I'm great!", 1.5), ("Good, thanks!", 1.5), ("All good here!", 1.0),
        ]),
        fam("not-great", &[
            ("Not great.", 2.0), ("Could be better.", 2.0), ("Meh, tired.", 1.0),
            ("Pretty tired today.", 1.0), ("Not so good.", 1.0),
        ]),
        fam("ask-back", &[
            ("How about you?", 2.5), ("And you?", 2.0), ("What about you?", 1.5),
            ("How are you?", 1.5), ("Good! How are you?", 1.0),
        ]),
        fam("congrats", &[
            ("Congratulations!", 3.0), ("Congrats!", 2.5), ("Congrats!!", 1.0),
            ("Congratulations!!", 0.8), ("Well done!", 1.5), ("Congrats on the {event}!", 0.8), ("Way to go on the {event}!", 0.6),
        ]),
        fam("excited", &[
            ("That's great news!", 2.0), ("That is great news!", 1.0), ("Amazing!", 2.0),
            ("Wow, amazing!", 1.5), ("Awesome!", 1.5), ("So awesome!", 1.0), ("Amazing, how was the {event}?", 0.5),
        ]),
        fam("ask-details", &[
            ("What happened?", 2.5), ("Tell me more!", 1.5), ("How did it happen?", 1.0),
            ("How did it go?", 1.0), ("Really? What happened?", 1.0), ("What happened at the {event}?", 0.5),
        ]),
        fam("no-worries", &[
            ("No worries!", 3.0), ("No worries.", 2.0), ("No worries at all.", 1.0),
            ("No rush!", 1.5), ("Take your time.", 1.5), ("Take your time!", 1.0), ("No worries, see you in {minutes}.", 0.6),
        ]),
        fam("ack", &[
            ("Ok", 2.0), ("Ok!", 1.5), ("Okay.", 1.5), ("Okay", 1.0), ("Got it.", 1.5),
            ("Alright.", 1.0), ("Ok, thanks for letting me know.", 1.0), ("Ok, see you at {place}.", 0.5),
        ]),
        fam("ask-eta", &[
            ("How long?", 2.0), ("When will you get here?", 1.5), ("What's your ETA?", 1.5),
            ("How far are you?", 1.0), ("How much longer?", 1.0), ("Are you near {place}?", 0.6),
        ]),
        fam("will-do", &[
            ("Will do!", 3.0), ("Will do.", 2.0), ("On it.", 1.5), ("On it!", 1.0),
            ("I'll take care of it.", 1.0), ("I will send it {day}.", 0.6),
            ("I'll send the {thing} soon.", 0.8), ("Sending the {thing} now.", 0.8), ("I'll review the {thing} {day}.", 0.6),
        ]),
        fam("ask-deadline", &[
            ("When do you need it?", 2.5), ("By when?", 1.5), ("When is it due?", 1.5),
            ("When do you need it by?", 1.0), ("Is {day} ok?", 0.8), ("When do you need the {thing}?", 0.8),
        ]),
        fam("busy", &[
            ("I'm busy right now.", 2.0), ("I am busy right now.", 1.0), ("Sorry, I'm swamped.", 1.5),
            ("Can't right now, sorry.", 1.5), ("In a meeting right now.", 1.0), ("Busy until {time}, sorry.", 0.6),
        ]),
        fam("sympathy", &[
            ("Oh no, I'm sorry.", 2.5), ("Oh no!", 2.0), ("Sorry to hear that.", 2.0),
            ("So sorry to hear that.", 1.0), ("That's too bad.", 1.5), ("That is too bad.", 0.8), ("Sorry about the {event}.", 0.6),
        ]),
        fam("offer-help", &[
            ("Can I help?", 2.0), ("Do you need anything?", 2.0), ("Let me know if I can help.", 1.5),
            ("Anything I can do?", 1.0), ("Need a ride?", 0.8), ("Want me to come by {day}?", 0.5),
        ]),
        fam("call-later", &[
            ("I'll call you later.", 2.5), ("I will call you later.", 1.0), ("Call you later!", 1.5),
            ("Can I call you back?", 1.5), ("I'll call you at {time}.", 0.8), ("Can we talk {day}?", 0.6),
        ]),
        fam("confirm", &[
            ("Yes, still on!", 2.0), ("Yes!", 2.0), ("Yep, see you then.", 1.5),
            ("Yes, see you then!", 1.0), ("Still on for {time}.", 0.8), ("Yep!", 1.0), ("Yes, see you at {place}.", 0.6),
        ]),
        fam("reschedule", &[
            ("Can we move it?", 2.0), ("Can we reschedule?", 2.0), ("Can we do {day} instead?", 1.0),
            ("Can we push it to {time}?", 1.0), ("Can we reschedule to {day}?", 0.8), ("Can we meet at {place} instead?", 0.6),
        ]),
        fam("laugh", &[
            ("Haha", 3.0), ("Haha!", 1.5), ("Hahaha", 1.5), ("Lol", 2.0), ("Lol!", 1.0),
            ("That's hilarious!", 1.0), ("So funny!", 1.0),
        ]),
        fam("ask-what", &[
            ("What is it?", 1.5), ("What video?", 1.5), ("Send me the link.", 1.5),
            ("Which one?", 1.0), ("Show me!", 1.0),
        ]),
        fam("bye", &[
            ("Goodnight!", 3.0), ("Good night!", 1.5), ("Night!", 1.5), ("Sleep well!", 1.5),
            ("Night, talk tomorrow.", 1.0), ("Sweet dreams!", 1.0),
        ]),
        fam("love", &[
            ("Love you!", 2.0), ("Love you too!", 2.0), ("Love you too", 1.0), ("Miss you!", 1.0),
            ("Aww, love you!", 1.0),
        ]),
        fam("on-my-way", &[
            ("On my way!", 3.0), ("On my way.", 1.5), ("Omw!", 1.0), ("Almost there!", 1.5),
            ("Be there in {minutes} minutes.", 1.0), ("Leaving now!", 1.0), ("On my way to {place}!", 0.6),
        ]),
        fam("here", &[
            ("I'm here.", 2.0), ("I am here.", 1.0), ("Here!", 1.5), ("Just got here.", 1.5),
            ("I'm at {place}.", 0.8), ("Waiting at {place}.", 0.6),
        ]),
    ];

    let mut slots = BTreeMap::new();
    slots.insert("time".to_string(), words(&[
        "noon", "1pm", "2pm", "3pm", "4pm", "5pm", "6pm", "7pm", "8pm", "9am", "10am", "11am",
        "12:30", "1:30", "11:30", "2:30", "5:30", "6:30", "half past one", "quarter to six",
    ]));
    slots.insert("place".to_string(), words(&[
        "the cafe", "the diner", "the office", "my place", "the park", "the station", "the mall",
        "the deli", "the food court", "the pizza place", "the sushi bar", "the bakery",
        "the library", "the lobby", "the gym", "the taco truck",
    ]));
    slots.insert("day".to_string(), words(&[
        "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday",
        "tomorrow", "today", "tonight", "this weekend", "next week",
    ]));
    slots.insert("thing".to_string(), words(&[
        "report", "slides", "doc", "invoice", "contract", "budget", "notes", "draft", "spreadsheet",
        "proposal", "agenda", "summary", "estimate", "minutes",
    ]));
    slots.insert("event".to_string(), words(&[
        "exam", "interview", "game", "race", "test", "match", "audition", "presentation",
        "finals", "recital", "tournament", "pitch",
    ]));
    slots.insert("favor".to_string(), words(&[
        "ride", "help", "gift", "advice", "dinner", "tip", "coffee", "card", "flowers", "lunch",
        "recommendation", "cookies",
    ]));
    slots.insert("minutes".to_string(), words(&["5", "10", "15", "20", "25", "30", "40", "45"]));

    SyntheticConfig {
        intents,
        families,
        slots,
        zipf_exponent: 1.0,
        n_pairs: 50_000,
        seed: 17,
        max_len: 30,
        min_intents: 5,
    }
}

/// Two intents whose pairs are individually identifiable through a slot
/// value copied from message to reply.
pub fn separable_two_intent_config() -> SyntheticConfig {
    let mut a = intent(
        "meet",
        &["Meet at {time}?", "Can we meet at {time}?", "Is {time} ok to meet?"],
        &[("meet-yes", 0.5), ("meet-no", 0.5)],
    );
    a.slots.insert(
        "time".into(),
        words(&["1pm", "2pm", "3pm", "4pm", "5pm", "6pm", "7pm", "8pm", "9am", "10am", "11am", "noon"]),
    );
    let mut b = intent(
        "send",
        &["Please send the {thing}", "Can you send the {thing}?", "Need the {thing} now"],
        &[("send-yes", 0.5), ("send-no", 0.5)],
    );
    b.slots.insert(
        "thing".into(),
        words(&["report", "slides", "doc", "invoice", "contract", "budget", "notes", "draft", "memo", "file", "plan", "list"]),
    );
    SyntheticConfig {
        intents: alloc::vec![a, b],
        families: alloc::vec![
            fam("meet-yes", &[("Yes, {time} works.", 1.0), ("See you at {time}!", 1.0)]),
            fam("meet-no", &[("Not at {time}, sorry.", 1.0), ("{time} is bad for me.", 1.0)]),
            fam("send-yes", &[("Sending the {thing} now.", 1.0), ("Here is the {thing}.", 1.0)]),
            fam("send-no", &[("The {thing} is not ready.", 1.0), ("No {thing} yet, sorry.", 1.0)]),
        ],
        slots: BTreeMap::new(),
        zipf_exponent: 0.0,
        n_pairs: 4_000,
        seed: 5,
        max_len: 30,
        min_intents: 2,
    }
}
