//! Generated thumbnails for corpus records without an image file.

use memir_core::encoders::fnv1a64;

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c if c.is_control() => {}
            c => out.push(c),
        }
    }
    out
}

/// A 256×256 SVG showing the id and label over a color derived from the id.
pub fn placeholder_svg(id: &str, label: Option<&str>) -> String {
    let hue = fnv1a64(id.as_bytes()) % 360;
    let mut lines = vec![format!(
        r#"<text x="128" y="110" font-size="22" text-anchor="middle" font-family="monospace">{}</text>"#,
        escape(id)
    )];
    if let Some(label) = label {
        for (i, part) in label.split(", ").take(6).enumerate() {
            lines.push(format!(
                r#"<text x="128" y="{}" font-size="14" text-anchor="middle" font-family="sans-serif">{}</text>"#,
                140 + 18 * i,
                escape(part)
            ));
        }
    }
    format!(
        concat!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="256" height="256" viewBox="0 0 256 256">"#,
            r#"<rect width="256" height="256" fill="hsl({hue},45%,78%)"/>{body}</svg>"#
        ),
        hue = hue,
        body = lines.join("")
    )
}

/// Media type guessed from a file extension.
pub fn media_type(path: &str) -> &'static str {
    let ext = path.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("svg") => "image/svg+xml",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_escaped() {
        let a = placeholder_svg("img0001", Some("dog, beach"));
        assert_eq!(a, placeholder_svg("img0001", Some("dog, beach")));
        assert_ne!(a, placeholder_svg("img0002", Some("dog, beach")));
        assert!(a.contains(">dog<") && a.contains(">beach<"));
        let evil = placeholder_svg("<x&y>", None);
        assert!(evil.contains("&lt;x&amp;y&gt;") && !evil.contains("<x&"));
    }

    #[test]
    fn media_types() {
        assert_eq!(media_type("a/b.PNG"), "image/png");
        assert_eq!(media_type("c.jpeg"), "image/jpeg");
        assert_eq!(media_type("noext"), "application/octet-stream");
    }
}
