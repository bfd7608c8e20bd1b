/// True for scalar values that render as emoji on their own. Skin-tone
/// modifiers, joiners, variation selectors and regional indicators are not
/// counted.
pub fn is_emoji(c: char) -> bool {
    let cp = c as u32;
    match cp {
        0x1F3FB..=0x1F3FF | 0x1F1E6..=0x1F1FF => false,
        0x1F000..=0x1FAFF => true,
        0x2600..=0x27BF => true,
        0x231A | 0x231B | 0x2328 | 0x23CF | 0x23E9..=0x23F3 | 0x23F8..=0x23FA => true,
        0x2B05..=0x2B07 | 0x2B1B | 0x2B1C | 0x2B50 | 0x2B55 => true,
        0x2934 | 0x2935 | 0x3030 | 0x303D | 0x3297 | 0x3299 => true,
        _ => false,
    }
}

/// Emoji scalar values of `text`, in order of appearance.
pub fn extract_emojis(text: &str) -> Vec<char> {
    text.chars().filter(|c| is_emoji(*c)).collect()
}
